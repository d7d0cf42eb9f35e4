use super::{Batch, Gradients, Head, Labels, Mat, ModelParams};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// `a (rows x inner) * b (inner x b.cols)`.
fn matmul(a: &[f64], rows: usize, b: &Mat) -> Vec<f64> {
    let inner = b.rows;
    let cols = b.cols;
    debug_assert_eq!(a.len(), rows * inner);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let o = &mut out[r * cols..(r + 1) * cols];
        for (k, &x) in a[r * inner..(r + 1) * inner].iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (oc, &w) in o.iter_mut().zip(b.row(k)) {
                *oc += x * w;
            }
        }
    }
    out
}

/// `grad (rows x b.cols) * b^T`, i.e. the input gradient of `matmul`.
fn matmul_bt(grad: &[f64], rows: usize, b: &Mat) -> Vec<f64> {
    let (inner, cols) = (b.rows, b.cols);
    let mut out = vec![0.0; rows * inner];
    for r in 0..rows {
        let g = &grad[r * cols..(r + 1) * cols];
        for k in 0..inner {
            out[r * inner + k] = g.iter().zip(b.row(k)).map(|(x, w)| x * w).sum();
        }
    }
    out
}

/// `dw += a^T * grad`, the weight gradient of `matmul`.
fn acc_at_grad(dw: &mut Mat, a: &[f64], grad: &[f64], rows: usize) {
    let (inner, cols) = (dw.rows, dw.cols);
    for r in 0..rows {
        let g = &grad[r * cols..(r + 1) * cols];
        for k in 0..inner {
            let x = a[r * inner + k];
            if x == 0.0 {
                continue;
            }
            for (d, &gv) in dw.row_mut(k).iter_mut().zip(g) {
                *d += x * gv;
            }
        }
    }
}

struct LayerNormOut {
    out: Vec<f64>,
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(x: &[f64], rows: usize, gain: &Mat, bias: &Mat) -> LayerNormOut {
    let d = gain.cols;
    let mut out = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let xh = (row[c] - mean) * rs;
            xhat[r * d + c] = xh;
            out[r * d + c] = gain.data[c] * xh + bias.data[c];
        }
    }
    LayerNormOut { out, xhat, rstd }
}

/// Returns the input gradient; accumulates gain and bias gradients.
fn layer_norm_backward(
    dout: &[f64],
    ln: &LayerNormOut,
    gain: &Mat,
    dgain: &mut Mat,
    dbias: &mut Mat,
) -> Vec<f64> {
    let d = gain.cols;
    let rows = ln.rstd.len();
    let mut dx = vec![0.0; rows * d];
    for r in 0..rows {
        let dy = &dout[r * d..(r + 1) * d];
        let xh = &ln.xhat[r * d..(r + 1) * d];
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for c in 0..d {
            dgain.data[c] += dy[c] * xh[c];
            dbias.data[c] += dy[c];
            let dxh = dy[c] * gain.data[c];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[c];
        }
        mean_dxh /= d as f64;
        mean_dxh_xh /= d as f64;
        for c in 0..d {
            let dxh = dy[c] * gain.data[c];
            dx[r * d + c] = ln.rstd[r] * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
        }
    }
    dx
}

/// Everything the backward pass needs from one sequence's forward pass.
struct SeqCache {
    tokens: Vec<u32>,
    mask: Vec<u8>,
    ln1: LayerNormOut,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `[head][query][key]`, zero for masked keys.
    probs: Vec<f64>,
    ctx: Vec<f64>,
    ln2: LayerNormOut,
    pre: Vec<f64>,
    act: Vec<f64>,
    x2: Vec<f64>,
    pooled: Vec<f64>,
    n_active: usize,
}

/// Per-sequence activations kept for [`loss_and_backward`].
pub struct ActivationCache {
    head: Head,
    seqs: Vec<SeqCache>,
}

impl ActivationCache {
    pub fn head(&self) -> Head {
        self.head
    }

    /// Final residual-stream states of sequence `b`, `seq x d_model`.
    pub fn final_states(&self, b: usize) -> &[f64] {
        &self.seqs[b].x2
    }

    /// Mean of the final states over unmasked positions.
    pub fn pooled(&self, b: usize) -> &[f64] {
        &self.seqs[b].pooled
    }
}

fn forward_seq(p: &ModelParams, tokens: &[u32], mask: &[u8]) -> SeqCache {
    let cfg = &p.config;
    let (l, d, f) = (tokens.len(), cfg.d_model, cfg.d_ffn);
    let (nh, dh) = (cfg.n_heads, cfg.head_dim());

    let mut x0 = vec![0.0; l * d];
    for (i, &t) in tokens.iter().enumerate() {
        let te = p.embed_tokens.row(t as usize);
        let pe = p.embed_pos.row(i);
        for c in 0..d {
            x0[i * d + c] = te[c] + pe[c] + p.type_embedding.data[c];
        }
    }

    let ln1 = layer_norm(&x0, l, &p.ln1_gain, &p.ln1_bias);
    let q = matmul(&ln1.out, l, &p.attn_q);
    let k = matmul(&ln1.out, l, &p.attn_k);
    let v = matmul(&ln1.out, l, &p.attn_v);

    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; nh * l * l];
    let mut ctx = vec![0.0; l * d];
    for h in 0..nh {
        let off = h * dh;
        for i in 0..l {
            let pr = &mut probs[(h * l + i) * l..(h * l + i + 1) * l];
            let mut max = f64::NEG_INFINITY;
            for j in 0..l {
                if mask[j] == 0 {
                    continue;
                }
                let s: f64 = (0..dh)
                    .map(|c| q[i * d + off + c] * k[j * d + off + c])
                    .sum::<f64>()
                    * scale;
                pr[j] = s;
                max = max.max(s);
            }
            let mut z = 0.0;
            for j in 0..l {
                if mask[j] != 0 {
                    pr[j] = (pr[j] - max).exp();
                    z += pr[j];
                }
            }
            for j in 0..l {
                if mask[j] != 0 {
                    pr[j] /= z;
                    for c in 0..dh {
                        ctx[i * d + off + c] += pr[j] * v[j * d + off + c];
                    }
                }
            }
        }
    }

    let attn_out = matmul(&ctx, l, &p.attn_o);
    let x1: Vec<f64> = x0.iter().zip(&attn_out).map(|(a, b)| a + b).collect();

    let ln2 = layer_norm(&x1, l, &p.ln2_gain, &p.ln2_bias);
    let pre = matmul(&ln2.out, l, &p.ffn1);
    let act: Vec<f64> = pre.iter().map(|&x| gelu(x)).collect();
    debug_assert_eq!(act.len(), l * f);
    let ffn_out = matmul(&act, l, &p.ffn2);
    let x2: Vec<f64> = x1.iter().zip(&ffn_out).map(|(a, b)| a + b).collect();

    let n_active = mask.iter().filter(|&&m| m != 0).count();
    let mut pooled = vec![0.0; d];
    for i in (0..l).filter(|&i| mask[i] != 0) {
        for c in 0..d {
            pooled[c] += x2[i * d + c];
        }
    }
    pooled.iter_mut().for_each(|x| *x /= n_active as f64);

    SeqCache {
        tokens: tokens.to_vec(),
        mask: mask.to_vec(),
        ln1,
        q,
        k,
        v,
        probs,
        ctx,
        ln2,
        pre,
        act,
        x2,
        pooled,
        n_active,
    }
}

/// Runs the encoder over a batch.
///
/// CLS logits are `batch x n_classes`, computed from the mean of the final
/// states over unmasked positions. MLM logits are `(batch*seq) x vocab_size`,
/// with rows at padded positions left at zero.
pub fn forward(params: &ModelParams, batch: &Batch, head: Head) -> Result<(Mat, ActivationCache)> {
    batch.validate(&params.config)?;
    let cfg = &params.config;
    let (s, d) = (batch.seq, cfg.d_model);
    let seqs: Vec<SeqCache> = (0..batch.batch)
        .map(|b| {
            forward_seq(
                params,
                &batch.tokens[b * s..(b + 1) * s],
                &batch.mask[b * s..(b + 1) * s],
            )
        })
        .collect();

    let logits = match head {
        Head::Cls => {
            let mut out = Mat::zeros(batch.batch, cfg.n_classes);
            for (b, sc) in seqs.iter().enumerate() {
                let row = matmul(&sc.pooled, 1, &params.cls_head);
                out.row_mut(b).copy_from_slice(&row);
            }
            out
        }
        Head::Mlm => {
            let mut out = Mat::zeros(batch.batch * s, cfg.vocab_size);
            for (b, sc) in seqs.iter().enumerate() {
                for i in (0..s).filter(|&i| sc.mask[i] != 0) {
                    let row = matmul(&sc.x2[i * d..(i + 1) * d], 1, &params.mlm_head);
                    out.row_mut(b * s + i).copy_from_slice(&row);
                }
            }
            out
        }
    };
    Ok((logits, ActivationCache { head, seqs }))
}

/// Cross-entropy of one logit row; writes `softmax - onehot` into `dlogits`.
fn cross_entropy(logits: &[f64], target: usize, dlogits: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&x| (x - max).exp()).sum();
    let lse = max + z.ln();
    for (g, &x) in dlogits.iter_mut().zip(logits) {
        *g = (x - lse).exp();
    }
    dlogits[target] -= 1.0;
    lse - logits[target]
}

fn backward_seq(p: &ModelParams, sc: &SeqCache, dx2: Vec<f64>, g: &mut Gradients) {
    let cfg = &p.config;
    let (l, d) = (sc.tokens.len(), cfg.d_model);
    let (nh, dh) = (cfg.n_heads, cfg.head_dim());

    // x2 = x1 + gelu(LN2(x1) W1) W2
    acc_at_grad(&mut g.ffn2, &sc.act, &dx2, l);
    let dact = matmul_bt(&dx2, l, &p.ffn2);
    let dpre: Vec<f64> = dact
        .iter()
        .zip(&sc.pre)
        .map(|(da, &x)| da * gelu_grad(x))
        .collect();
    acc_at_grad(&mut g.ffn1, &sc.ln2.out, &dpre, l);
    let dh2 = matmul_bt(&dpre, l, &p.ffn1);
    let dln2 = layer_norm_backward(&dh2, &sc.ln2, &p.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);
    let dx1: Vec<f64> = dx2.iter().zip(&dln2).map(|(a, b)| a + b).collect();

    // x1 = x0 + attn(LN1(x0)) Wo
    acc_at_grad(&mut g.attn_o, &sc.ctx, &dx1, l);
    let dctx = matmul_bt(&dx1, l, &p.attn_o);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; l * d];
    let mut dk = vec![0.0; l * d];
    let mut dv = vec![0.0; l * d];
    let mut dprob = vec![0.0; l];
    for h in 0..nh {
        let off = h * dh;
        for i in 0..l {
            let pr = &sc.probs[(h * l + i) * l..(h * l + i + 1) * l];
            let mut dot = 0.0;
            for j in 0..l {
                if sc.mask[j] == 0 {
                    dprob[j] = 0.0;
                    continue;
                }
                let mut dp = 0.0;
                for c in 0..dh {
                    let dc = dctx[i * d + off + c];
                    dp += dc * sc.v[j * d + off + c];
                    dv[j * d + off + c] += pr[j] * dc;
                }
                dprob[j] = dp;
                dot += pr[j] * dp;
            }
            for j in 0..l {
                if sc.mask[j] == 0 {
                    continue;
                }
                let ds = pr[j] * (dprob[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in 0..dh {
                    dq[i * d + off + c] += ds * sc.k[j * d + off + c];
                    dk[j * d + off + c] += ds * sc.q[i * d + off + c];
                }
            }
        }
    }
    let h1 = &sc.ln1.out;
    acc_at_grad(&mut g.attn_q, h1, &dq, l);
    acc_at_grad(&mut g.attn_k, h1, &dk, l);
    acc_at_grad(&mut g.attn_v, h1, &dv, l);
    let mut dh1 = matmul_bt(&dq, l, &p.attn_q);
    for (a, b) in dh1.iter_mut().zip(matmul_bt(&dk, l, &p.attn_k)) {
        *a += b;
    }
    for (a, b) in dh1.iter_mut().zip(matmul_bt(&dv, l, &p.attn_v)) {
        *a += b;
    }
    let dln1 = layer_norm_backward(&dh1, &sc.ln1, &p.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias);

    // x0 = tok + pos + type
    for (i, &t) in sc.tokens.iter().enumerate() {
        let dx0 = dx1[i * d..(i + 1) * d]
            .iter()
            .zip(&dln1[i * d..(i + 1) * d])
            .map(|(a, b)| a + b);
        let row_t = t as usize * d;
        for (c, v) in dx0.enumerate() {
            g.embed_tokens.data[row_t + c] += v;
            g.embed_pos.data[i * d + c] += v;
            g.type_embedding.data[c] += v;
        }
    }
}

/// Mean cross-entropy over labeled positions and its exact gradient with
/// respect to every parameter tensor.
pub fn loss_and_backward(params: &ModelParams, batch: &Batch, head: Head) -> Result<(f64, Gradients)> {
    let (logits, cache) = forward(params, batch, head)?;
    let cfg = &params.config;
    let (s, d) = (batch.seq, cfg.d_model);
    let mut grads = params.zeros_like();
    let mut loss = 0.0;

    match (head, &batch.labels) {
        (Head::Cls, Labels::Class(ys)) => {
            let n = ys.len() as f64;
            let mut dlog = vec![0.0; cfg.n_classes];
            for (b, (sc, &y)) in cache.seqs.iter().zip(ys).enumerate() {
                loss += cross_entropy(logits.row(b), y, &mut dlog);
                dlog.iter_mut().for_each(|g| *g /= n);
                acc_at_grad(&mut grads.cls_head, &sc.pooled, &dlog, 1);
                let dpooled = matmul_bt(&dlog, 1, &params.cls_head);
                let mut dx2 = vec![0.0; s * d];
                for i in (0..s).filter(|&i| sc.mask[i] != 0) {
                    for c in 0..d {
                        dx2[i * d + c] = dpooled[c] / sc.n_active as f64;
                    }
                }
                backward_seq(params, sc, dx2, &mut grads);
            }
            loss /= n;
        }
        (Head::Mlm, Labels::Mlm(targets)) => {
            let labeled = |b: usize, i: usize| -> Option<usize> {
                let idx = b * s + i;
                if batch.mask[idx] == 0 {
                    None
                } else {
                    targets[idx].map(|t| t as usize)
                }
            };
            let n = (0..batch.batch)
                .flat_map(|b| (0..s).map(move |i| (b, i)))
                .filter(|&(b, i)| labeled(b, i).is_some())
                .count();
            if n == 0 {
                return Err(Error::Domain("batch has no labeled MLM positions".into()));
            }
            let mut dlog = vec![0.0; cfg.vocab_size];
            for (b, sc) in cache.seqs.iter().enumerate() {
                let mut dx2 = vec![0.0; s * d];
                let mut any = false;
                for i in 0..s {
                    let Some(t) = labeled(b, i) else { continue };
                    any = true;
                    loss += cross_entropy(logits.row(b * s + i), t, &mut dlog);
                    dlog.iter_mut().for_each(|g| *g /= n as f64);
                    let xi = &sc.x2[i * d..(i + 1) * d];
                    acc_at_grad(&mut grads.mlm_head, xi, &dlog, 1);
                    dx2[i * d..(i + 1) * d].copy_from_slice(&matmul_bt(&dlog, 1, &params.mlm_head));
                }
                if any {
                    backward_seq(params, sc, dx2, &mut grads);
                }
            }
            loss /= n as f64;
        }
        (_, Labels::None) => {
            return Err(Error::Domain("batch has no labels".into()));
        }
        (head, _) => {
            return Err(Error::Config(format!("labels do not match the {head:?} head")));
        }
    }
    Ok((loss, grads))
}

/// Argmax class per sequence; ties go to the lowest class index.
pub fn predict(params: &ModelParams, batch: &Batch) -> Result<Vec<usize>> {
    let (logits, _) = forward(params, batch, Head::Cls)?;
    Ok((0..logits.rows)
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}
