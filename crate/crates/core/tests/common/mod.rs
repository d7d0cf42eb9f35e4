//! Test-only oracles, independent of the library's implementation paths.
#![allow(dead_code, clippy::needless_range_loop)]

use noisytune::rng::derive_substream;
use noisytune::toymodel::{
    loss_and_backward, Batch, Head, InitProfile, Labels, Mat, ModelConfig, ModelParams,
};

/// Brute-force two-pass Bessel-corrected sample std.
pub fn two_pass_std(xs: &[f32]) -> f64 {
    let n = xs.len();
    if n <= 1 {
        return 0.0;
    }
    let mean = xs.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
    let ss: f64 = xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum();
    (ss / (n - 1) as f64).sqrt()
}

fn at(m: &Mat, r: usize, c: usize) -> f64 {
    m.data[r * m.cols + c]
}

fn ln_row(x: &[f64], gain: &Mat, bias: &Mat) -> Vec<f64> {
    let d = x.len() as f64;
    let mu = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
    x.iter()
        .enumerate()
        .map(|(c, v)| gain.data[c] * (v - mu) / (var + 1e-5).sqrt() + bias.data[c])
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// Straight nested-loop evaluation of the encoder, one output element at a time.
pub fn reference_forward(p: &ModelParams, batch: &Batch, head: Head) -> Vec<f64> {
    let cfg = &p.config;
    let (d, nh) = (cfg.d_model, cfg.n_heads);
    let dh = d / nh;
    let s = batch.seq;
    let mut out = Vec::new();
    for b in 0..batch.batch {
        let tok = |i: usize| batch.tokens[b * s + i] as usize;
        let live = |j: usize| batch.mask[b * s + j] != 0;
        let x0: Vec<Vec<f64>> = (0..s)
            .map(|i| {
                (0..d)
                    .map(|c| {
                        at(&p.embed_tokens, tok(i), c) + at(&p.embed_pos, i, c) + p.type_embedding.data[c]
                    })
                    .collect()
            })
            .collect();
        let h1: Vec<Vec<f64>> = x0.iter().map(|r| ln_row(r, &p.ln1_gain, &p.ln1_bias)).collect();
        let proj = |w: &Mat, i: usize, c: usize| -> f64 { (0..d).map(|k| h1[i][k] * at(w, k, c)).sum() };
        let mut x1 = x0.clone();
        for i in 0..s {
            let mut ctx = vec![0.0; d];
            for h in 0..nh {
                let score = |j: usize| -> f64 {
                    (h * dh..(h + 1) * dh)
                        .map(|c| proj(&p.attn_q, i, c) * proj(&p.attn_k, j, c))
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                };
                let live_keys: Vec<usize> = (0..s).filter(|&j| live(j)).collect();
                let m = live_keys
                    .iter()
                    .map(|&j| score(j))
                    .fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = live_keys.iter().map(|&j| (score(j) - m).exp()).sum();
                for &j in &live_keys {
                    let w = (score(j) - m).exp() / z;
                    for c in h * dh..(h + 1) * dh {
                        ctx[c] += w * proj(&p.attn_v, j, c);
                    }
                }
            }
            for c in 0..d {
                x1[i][c] += (0..d).map(|k| ctx[k] * at(&p.attn_o, k, c)).sum::<f64>();
            }
        }
        let mut x2 = x1.clone();
        for i in 0..s {
            let h2 = ln_row(&x1[i], &p.ln2_gain, &p.ln2_bias);
            let hidden: Vec<f64> = (0..cfg.d_ffn)
                .map(|f| gelu((0..d).map(|k| h2[k] * at(&p.ffn1, k, f)).sum()))
                .collect();
            for c in 0..d {
                x2[i][c] += (0..cfg.d_ffn).map(|f| hidden[f] * at(&p.ffn2, f, c)).sum::<f64>();
            }
        }
        match head {
            Head::Cls => {
                let n = (0..s).filter(|&i| live(i)).count() as f64;
                let pooled: Vec<f64> = (0..d)
                    .map(|c| (0..s).filter(|&i| live(i)).map(|i| x2[i][c]).sum::<f64>() / n)
                    .collect();
                for k in 0..cfg.n_classes {
                    out.push((0..d).map(|c| pooled[c] * at(&p.cls_head, c, k)).sum());
                }
            }
            Head::Mlm => {
                for i in 0..s {
                    for v in 0..cfg.vocab_size {
                        out.push(if live(i) {
                            (0..d).map(|c| x2[i][c] * at(&p.mlm_head, c, v)).sum()
                        } else {
                            0.0
                        });
                    }
                }
            }
        }
    }
    out
}

pub fn random_tiny_config(seed: u64) -> ModelConfig {
    let mut r = derive_substream(seed, "config");
    let n_heads = 1 + r.below(2);
    ModelConfig {
        vocab_size: 4 + r.below(5),
        d_model: n_heads * (2 + r.below(2)),
        n_heads,
        d_ffn: 3 + r.below(4),
        max_seq_len: 3 + r.below(3),
        n_classes: 2 + r.below(3),
        init_profile: InitProfile {
            embeddings: 0.5,
            attention: 0.4,
            ffn: 0.4,
            heads: 0.5,
        },
    }
}

pub fn random_batch(cfg: &ModelConfig, head: Head, seed: u64) -> Batch {
    let mut r = derive_substream(seed, "batch");
    let (b, s) = (2 + r.below(2), cfg.max_seq_len);
    let tokens: Vec<u32> = (0..b * s).map(|_| r.below(cfg.vocab_size) as u32).collect();
    let mut mask: Vec<u8> = (0..b * s).map(|_| (r.unit_f64() < 0.8) as u8).collect();
    for row in 0..b {
        mask[row * s] = 1;
    }
    let labels = match head {
        Head::Cls => Labels::Class((0..b).map(|_| r.below(cfg.n_classes)).collect()),
        Head::Mlm => {
            let mut t: Vec<Option<u32>> = (0..b * s)
                .map(|_| (r.unit_f64() < 0.5).then(|| r.below(cfg.vocab_size) as u32))
                .collect();
            t[0] = Some(1);
            Labels::Mlm(t)
        }
    };
    Batch {
        batch: b,
        seq: s,
        tokens,
        mask,
        labels,
    }
}

/// Central finite differences (eps = 1e-4) against the analytic gradient.
/// Returns the worst per-entry relative error of every tensor, where the
/// relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn fd_gradient_check(p: &ModelParams, batch: &Batch, head: Head) -> Vec<(String, f64)> {
    const EPS: f64 = 1e-4;
    let (_, grads) = loss_and_backward(p, batch, head).unwrap();
    let mut probe = p.clone();
    let mut worst = Vec::new();
    for (name, g) in grads.tensors() {
        let mut max_rel = 0.0f64;
        for i in 0..g.data.len() {
            let orig = probe.get(name).unwrap().data[i];
            probe.get_mut(name).unwrap().data[i] = orig + EPS;
            let (lp, _) = loss_and_backward(&probe, batch, head).unwrap();
            probe.get_mut(name).unwrap().data[i] = orig - EPS;
            let (lm, _) = loss_and_backward(&probe, batch, head).unwrap();
            probe.get_mut(name).unwrap().data[i] = orig;
            let numeric = (lp - lm) / (2.0 * EPS);
            let analytic = g.data[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
        worst.push((name.to_owned(), max_rel));
    }
    worst
}
