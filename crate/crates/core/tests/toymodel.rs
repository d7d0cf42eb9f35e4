mod common;

use common::{fd_gradient_check, random_batch, random_tiny_config, reference_forward};
use noisytune::rng::derive_substream;
use noisytune::toymodel::{
    forward, init_params, loss_and_backward, Batch, Head, InitProfile, Labels, ModelConfig,
};

#[test]
fn forward_matches_loop_reference() {
    let cfg = ModelConfig {
        vocab_size: 6,
        d_model: 4,
        n_heads: 1,
        d_ffn: 5,
        max_seq_len: 3,
        n_classes: 3,
        init_profile: InitProfile {
            embeddings: 0.7,
            attention: 0.6,
            ffn: 0.5,
            heads: 0.4,
        },
    };
    let mut p = init_params(&cfg, 17).unwrap();
    // non-trivial layer norm parameters
    for (i, x) in p.ln1_gain.data.iter_mut().enumerate() {
        *x = 1.0 + 0.1 * i as f64;
    }
    p.ln2_bias.data = vec![0.05, -0.1, 0.2, 0.0];
    p.type_embedding.data = vec![0.3, -0.2, 0.1, 0.0];

    let mut batch = Batch::from_sequences(&[&[0, 5, 2], &[4, 4, 1]], Labels::None);
    batch.mask = vec![1, 1, 1, 1, 0, 1];
    for head in [Head::Cls, Head::Mlm] {
        let (logits, _) = forward(&p, &batch, head).unwrap();
        let reference = reference_forward(&p, &batch, head);
        assert_eq!(logits.data.len(), reference.len());
        for (a, b) in logits.data.iter().zip(&reference) {
            let rel = (a - b).abs() / b.abs().max(1e-300);
            assert!(rel < 1e-10 || (a - b).abs() < 1e-15, "{head:?}: {a} vs {b}");
        }
    }
}

#[test]
fn gradients_match_finite_differences_cls() {
    for trial in 0..4u64 {
        let cfg = random_tiny_config(100 + trial);
        let p = init_params(&cfg, trial).unwrap();
        let batch = random_batch(&cfg, Head::Cls, 200 + trial);
        let worst = fd_gradient_check(&p, &batch, Head::Cls);
        for (name, err) in &worst {
            assert!(*err < 1e-4, "trial {trial} cls {name}: rel err {err:e}");
        }
    }
}

#[test]
fn gradients_match_finite_differences_mlm() {
    for trial in 0..4u64 {
        let cfg = random_tiny_config(300 + trial);
        let p = init_params(&cfg, trial).unwrap();
        let batch = random_batch(&cfg, Head::Mlm, 400 + trial);
        let worst = fd_gradient_check(&p, &batch, Head::Mlm);
        for (name, err) in &worst {
            assert!(*err < 1e-4, "trial {trial} mlm {name}: rel err {err:e}");
        }
    }
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let cfg = random_tiny_config(9);
    let p = init_params(&cfg, 1).unwrap();
    let batch = random_batch(&cfg, Head::Cls, 2);
    let (l1, g1) = loss_and_backward(&p, &batch, Head::Cls).unwrap();
    let (l2, g2) = loss_and_backward(&p, &batch, Head::Cls).unwrap();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(g1, g2);
}

#[test]
fn mask_invariance_randomized() {
    for trial in 0..10u64 {
        let cfg = random_tiny_config(50 + trial);
        let p = init_params(&cfg, trial).unwrap();
        let mut a = random_batch(&cfg, Head::Cls, trial);
        a.labels = Labels::None;
        let mut rng = derive_substream(trial, "mask");
        for m in a.mask.iter_mut() {
            *m = (rng.unit_f64() < 0.6) as u8;
        }
        for b in 0..a.batch {
            a.mask[b * a.seq] = 1;
        }
        let mut b = a.clone();
        for (t, &m) in b.tokens.iter_mut().zip(&a.mask) {
            if m == 0 {
                *t = rng.below(cfg.vocab_size) as u32;
            }
        }
        for head in [Head::Cls, Head::Mlm] {
            assert_eq!(forward(&p, &a, head).unwrap().0, forward(&p, &b, head).unwrap().0);
        }
    }
}
