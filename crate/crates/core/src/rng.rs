//! Deterministic per-key random substreams.
//!
//! A substream is a ChaCha8 generator keyed by the 64-bit seed (expanded with
//! `SeedableRng::seed_from_u64`) and placed on the ChaCha stream selected by
//! the 64-bit FNV-1a hash of the key's UTF-8 bytes. The same `(seed, key)`
//! always yields the same sequence, independent of what other keys were drawn
//! and in which order.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a, 64-bit. Stable across platforms and releases.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

#[derive(Debug, Clone)]
pub struct RngSubstream(ChaCha8Rng);

pub fn derive_substream(seed: u64, key: &str) -> RngSubstream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a64(key.as_bytes()));
    RngSubstream(rng)
}

/// Mixes a seed with a small tag into a new seed, for child seeds such as
/// "the noise seed of run 7".
pub fn child_seed(seed: u64, tag: &str) -> u64 {
    derive_substream(seed, tag).next_u64()
}

impl RngSubstream {
    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn unit_f64(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in `0..n` (Lemire's multiply-shift; bias below 2^-32 for small n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.0.next_u64() as u128 * n as u128) >> 64) as usize
    }
}

impl RngCore for RngSubstream {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draws(seed: u64, key: &str, n: usize) -> Vec<u64> {
        let mut r = derive_substream(seed, key);
        (0..n).map(|_| r.next_u64()).collect()
    }

    #[test]
    fn same_key_same_stream() {
        assert_eq!(draws(42, "ffn1", 1000), draws(42, "ffn1", 1000));
    }

    #[test]
    fn different_name_differs() {
        let (a, b) = (draws(42, "ffn1", 100), draws(42, "ffn2", 100));
        assert!(a.iter().zip(&b).any(|(x, y)| x != y));
    }

    #[test]
    fn different_seed_differs() {
        let (a, b) = (draws(42, "ffn1", 100), draws(43, "ffn1", 100));
        assert!(a.iter().zip(&b).any(|(x, y)| x != y));
    }

    #[test]
    fn fnv_reference_values() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn unit_f64_in_range() {
        let mut r = derive_substream(1, "u");
        for _ in 0..10_000 {
            let u = r.unit_f64();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn below_covers_range() {
        let mut r = derive_substream(3, "b");
        let mut seen = [0usize; 5];
        for _ in 0..5_000 {
            seen[r.below(5)] += 1;
        }
        assert!(seen.iter().all(|&c| c > 800));
    }
}
