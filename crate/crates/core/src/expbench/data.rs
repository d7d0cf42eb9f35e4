use std::collections::HashSet;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use super::ScenarioSpec;
use crate::error::{Error, Result};
use crate::rng::{derive_substream, RngSubstream};
use crate::trainkit::{ClassExample, MlmExample};

/// Order-1 Markov chain over the regular tokens, started from the uniform
/// distribution.
#[derive(Debug, Clone)]
pub struct MarkovChain {
    rows: Vec<Vec<f64>>,
    samplers: Vec<WeightedIndex<f64>>,
}

impl MarkovChain {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let samplers = rows
            .iter()
            .map(|r| WeightedIndex::new(r).map_err(|e| Error::Domain(format!("transition row: {e}"))))
            .collect::<Result<_>>()?;
        Ok(MarkovChain { rows, samplers })
    }

    /// Rows `softmax((z + affinity * same_bucket) / temperature)` with `z` iid
    /// standard normal.
    fn random(buckets: &[usize], affinity: f64, temperature: f64, rng: &mut RngSubstream) -> Result<Self> {
        let n = buckets.len();
        let rows = (0..n)
            .map(|a| {
                let logits: Vec<f64> = (0..n)
                    .map(|b| {
                        let z: f64 = StandardNormal.sample(rng);
                        (z + if buckets[a] == buckets[b] { affinity } else { 0.0 }) / temperature
                    })
                    .collect();
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|x| x / z).collect()
            })
            .collect();
        Self::from_rows(rows)
    }

    /// Row-wise `(1 - delta) * self + delta * other`.
    pub fn interpolate(&self, other: &MarkovChain, delta: f64) -> Result<Self> {
        let rows = self
            .rows
            .iter()
            .zip(&other.rows)
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (1.0 - delta) * x + delta * y)
                    .collect()
            })
            .collect();
        Self::from_rows(rows)
    }

    pub fn n_states(&self) -> usize {
        self.rows.len()
    }

    pub fn transition(&self, from: usize, to: usize) -> f64 {
        self.rows[from][to]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn sample_sequence(&self, len: usize, rng: &mut RngSubstream) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        if len == 0 {
            return out;
        }
        let mut state = rng.below(self.n_states());
        out.push(state as u32);
        for _ in 1..len {
            state = self.samplers[state].sample(rng);
            out.push(state as u32);
        }
        out
    }
}

/// Everything fixed by a scenario's world seed.
#[derive(Debug, Clone)]
pub struct World {
    pub buckets: Vec<usize>,
    pub pretrain_chain: MarkovChain,
    pub downstream_chain: MarkovChain,
}

impl World {
    pub fn new(spec: &ScenarioSpec) -> Result<Self> {
        let c = &spec.corpus;
        let n = spec.n_regular_tokens();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut derive_substream(spec.world_seed, "buckets"));
        let mut buckets = vec![0; n];
        for (i, &t) in perm.iter().enumerate() {
            buckets[t] = i % c.n_buckets;
        }
        let mut rng = derive_substream(spec.world_seed, "pretrain-chain");
        let pretrain_chain = MarkovChain::random(&buckets, c.bucket_affinity, c.temperature, &mut rng)?;
        let mut rng = derive_substream(spec.world_seed, "independent-chain");
        let independent = MarkovChain::random(&buckets, c.bucket_affinity, c.temperature, &mut rng)?;
        let downstream_chain = pretrain_chain.interpolate(&independent, spec.downstream.delta)?;
        Ok(World {
            buckets,
            pretrain_chain,
            downstream_chain,
        })
    }
}

/// Class of a token sequence: the most frequent bucket (lowest on ties),
/// modulo the number of classes. Tokens outside the bucket map are ignored.
pub fn label_of(tokens: &[u32], buckets: &[usize], n_buckets: usize, n_classes: usize) -> usize {
    let mut counts = vec![0usize; n_buckets];
    for &t in tokens {
        if let Some(&b) = buckets.get(t as usize) {
            counts[b] += 1;
        }
    }
    let mut best = 0;
    for (b, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = b;
        }
    }
    best % n_classes
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainCorpus {
    pub examples: Vec<MlmExample>,
    pub n_masked: usize,
    pub warnings: Vec<String>,
}

/// Masked-token corpus sampled from the pretraining chain. Each position is
/// replaced by the mask token with probability `mask_rate`, keeping the
/// original id as its target.
pub fn gen_pretrain_corpus(spec: &ScenarioSpec, seed: u64) -> Result<PretrainCorpus> {
    spec.validate()?;
    let world = World::new(spec)?;
    let c = &spec.corpus;
    let mask = spec.mask_token();
    let mut seq_rng = derive_substream(seed, "pretrain-sequences");
    let mut mask_rng = derive_substream(seed, "pretrain-mask");
    let mut n_masked = 0;
    let examples = (0..c.n_sequences)
        .map(|_| {
            let mut tokens = world.pretrain_chain.sample_sequence(c.seq_len, &mut seq_rng);
            let targets = tokens
                .iter_mut()
                .map(|t| {
                    (mask_rng.unit_f64() < c.mask_rate).then(|| {
                        n_masked += 1;
                        std::mem::replace(t, mask)
                    })
                })
                .collect();
            MlmExample { tokens, targets }
        })
        .collect();
    let mut warnings = Vec::new();
    if n_masked == 0 {
        let w = "pretraining corpus has no masked positions; it cannot be used for masked-token training"
            .to_owned();
        log::warn!("{w}");
        warnings.push(w);
    }
    Ok(PretrainCorpus {
        examples,
        n_masked,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamData {
    pub train: Vec<ClassExample>,
    pub eval: Vec<ClassExample>,
}

/// Class-balanced, disjoint train and eval sets sampled from the downstream
/// chain. Sequences are drawn until every class quota is full; repeats of an
/// already drawn sequence are discarded.
pub fn gen_downstream(spec: &ScenarioSpec, seed: u64) -> Result<DownstreamData> {
    spec.validate()?;
    let world = World::new(spec)?;
    let d = &spec.downstream;
    let mut rng = derive_substream(seed, "downstream");
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    let mut draw_split = |n: usize, rng: &mut RngSubstream| -> Result<Vec<ClassExample>> {
        let k = d.n_classes;
        let mut quota: Vec<usize> = (0..k).map(|c| n / k + usize::from(c < n % k)).collect();
        let mut out = Vec::with_capacity(n);
        let max_draws = 1000 * n.max(1);
        let mut draws = 0;
        while out.len() < n {
            draws += 1;
            if draws > max_draws {
                return Err(Error::Domain(format!(
                    "could not fill class quotas {quota:?} after {max_draws} draws"
                )));
            }
            let len = d.min_len + rng.below(d.max_len - d.min_len + 1);
            let tokens = world.downstream_chain.sample_sequence(len, rng);
            let label = label_of(&tokens, &world.buckets, spec.corpus.n_buckets, k);
            if quota[label] == 0 || seen.contains(&tokens) {
                continue;
            }
            quota[label] -= 1;
            seen.insert(tokens.clone());
            out.push(ClassExample { tokens, label });
        }
        Ok(out)
    };
    let train = draw_split(d.n_train, &mut rng)?;
    let eval = draw_split(d.n_eval, &mut rng)?;
    Ok(DownstreamData { train, eval })
}

/// `round(fraction * len)` examples (at least one), chosen by a seeded
/// permutation and kept in their original order. The full fraction returns
/// the set unchanged.
pub fn subsample(train: &[ClassExample], fraction: f64, seed: u64) -> Vec<ClassExample> {
    let n = ((fraction * train.len() as f64).round() as usize).clamp(1, train.len().max(1));
    if n >= train.len() {
        return train.to_vec();
    }
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut derive_substream(seed, "fraction"));
    let mut keep = idx[..n].to_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| train[i].clone()).collect()
}

pub fn unigram_frequencies<'a>(seqs: impl IntoIterator<Item = &'a [u32]>, n_states: usize) -> Vec<f64> {
    let mut counts = vec![0.0; n_states];
    let mut total = 0.0;
    for s in seqs {
        for &t in s {
            counts[t as usize] += 1.0;
            total += 1.0;
        }
    }
    if total > 0.0 {
        counts.iter_mut().for_each(|c| *c /= total);
    }
    counts
}

pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Total-variation distance between the empirical bigram distribution of
/// `seqs` and the one implied by `chain` with the same empirical source
/// frequencies: `1/2 * sum_a f(a) * sum_b |P_hat(b|a) - P(b|a)|`.
pub fn bigram_tv<'a>(seqs: impl IntoIterator<Item = &'a [u32]>, chain: &MarkovChain) -> f64 {
    let n = chain.n_states();
    let mut counts = vec![vec![0.0; n]; n];
    let mut total = 0.0;
    for s in seqs {
        for w in s.windows(2) {
            counts[w[0] as usize][w[1] as usize] += 1.0;
            total += 1.0;
        }
    }
    if total == 0.0 {
        return 0.0;
    }
    let mut tv = 0.0;
    for (a, row) in counts.iter().enumerate() {
        let from: f64 = row.iter().sum();
        if from == 0.0 {
            continue;
        }
        let dev: f64 = row
            .iter()
            .enumerate()
            .map(|(b, c)| (c / from - chain.transition(a, b)).abs())
            .sum();
        tv += from / total * dev;
    }
    0.5 * tv
}
