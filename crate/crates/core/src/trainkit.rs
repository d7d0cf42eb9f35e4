//! Optimizer, finetuning loops and the two regularized finetuning baselines.
//!
//! * Adam with bias correction.
//! * Mixout: after every optimizer step each parameter element is reset to its
//!   pretrained value with probability `p`.
//! * RecAdam-style annealing: the task loss is weighted by
//!   `k(t) = 1 / (1 + exp(-a (t - t0)))` and a quadratic pull toward the
//!   pretrained weights by `1 - k(t)`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ValidationError};
use crate::exec::Execution;
use crate::rng::derive_substream;
use crate::tensorstore::Checkpoint;
use crate::toymodel::{
    checkpoint_to_params, loss_and_backward, predict, Batch, Gradients, Head, Labels, ModelConfig,
    ModelParams, ParamGroup,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 10,
            batch_size: 8,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// `lr == 0` is accepted: it is the identity run used in consistency checks.
    pub fn validate(&self) -> Result<(), ValidationError> {
        let bad = |field, requirement, value: String| {
            Err(ValidationError::OutOfRange {
                field,
                requirement,
                value,
            })
        };
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", "a finite number >= 0", self.lr.to_string());
        }
        if self.epochs == 0 {
            return bad("epochs", ">= 1", "0".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", ">= 1", "0".into());
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(field, "in (0, 1)", b.to_string());
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad("eps", "> 0", self.eps.to_string());
        }
        Ok(())
    }
}

/// Hyperparameter search grids. The learning-rate grid is rescaled for a
/// model this small; the others follow the usual finetuning ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchGrid {
    pub lr: Vec<f64>,
    pub epochs: Vec<usize>,
    pub batch_size: Vec<usize>,
    pub lambda: Vec<f64>,
}

impl Default for SearchGrid {
    fn default() -> Self {
        SearchGrid {
            lr: vec![3e-4, 1e-3, 3e-3],
            epochs: vec![3, 5, 7, 10, 15, 20],
            batch_size: vec![8, 16, 32],
            lambda: vec![0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum FinetuneMethod {
    Vanilla,
    Mixout {
        p: f64,
    },
    #[serde(rename = "recadam")]
    RecAdam {
        anneal_a: f64,
        /// Step at which task and penalty weights cross; `None` means half of
        /// the total step count.
        #[serde(default)]
        anneal_t0: Option<u64>,
        penalty_weight: f64,
    },
}

impl FinetuneMethod {
    pub fn mixout_default() -> Self {
        FinetuneMethod::Mixout { p: 0.1 }
    }

    pub fn recadam_default() -> Self {
        FinetuneMethod::RecAdam {
            anneal_a: 0.5,
            anneal_t0: None,
            penalty_weight: 1.0,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            FinetuneMethod::Vanilla => "vanilla",
            FinetuneMethod::Mixout { .. } => "mixout",
            FinetuneMethod::RecAdam { .. } => "recadam",
        }
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        match *self {
            FinetuneMethod::Vanilla => Ok(()),
            FinetuneMethod::Mixout { p } if (0.0..=1.0).contains(&p) => Ok(()),
            FinetuneMethod::Mixout { p } => Err(ValidationError::OutOfRange {
                field: "p",
                requirement: "in [0, 1]",
                value: p.to_string(),
            }),
            FinetuneMethod::RecAdam {
                anneal_a,
                penalty_weight,
                ..
            } => {
                if !(anneal_a > 0.0 && anneal_a.is_finite()) {
                    return Err(ValidationError::OutOfRange {
                        field: "anneal_a",
                        requirement: "> 0",
                        value: anneal_a.to_string(),
                    });
                }
                if !(penalty_weight > 0.0 && penalty_weight.is_finite()) {
                    return Err(ValidationError::OutOfRange {
                        field: "penalty_weight",
                        requirement: "> 0",
                        value: penalty_weight.to_string(),
                    });
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One Adam step with bias correction, in place. Gradients are checked for
/// non-finite values before anything is modified.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<()> {
    if !params.is_congruent(grads) || !params.is_congruent(&state.m) {
        return Err(Error::Config(
            "gradient / optimizer state shapes do not match parameters".into(),
        ));
    }
    if let Some((name, _)) = grads
        .tensors()
        .into_iter()
        .find(|(_, g)| g.data.iter().any(|x| !x.is_finite()))
    {
        return Err(Error::NonFinite(name.to_owned()));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut().into_iter().zip(state.v.tensors_mut()));
    for (((_, p), (_, g)), ((_, m), (_, v))) in tensors {
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
            v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
            let m_hat = m.data[i] / c1;
            let v_hat = v.data[i] / c2;
            p.data[i] -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

/// Resets each element of `current` to its pretrained value with probability
/// `p`. Draws come from the `(seed, "mixout/<step>/<tensor>")` substream.
pub fn mixout_apply(current: &mut ModelParams, pretrained: &ModelParams, p: f64, seed: u64, step: u64) {
    if p <= 0.0 {
        return;
    }
    current.zip_mut(pretrained, |name, cur, pre| {
        if p >= 1.0 {
            cur.data.copy_from_slice(&pre.data);
            return;
        }
        let mut rng = derive_substream(seed, &format!("mixout/{step}/{name}"));
        for (c, &w) in cur.data.iter_mut().zip(&pre.data) {
            if rng.unit_f64() < p {
                *c = w;
            }
        }
    });
}

/// Annealing coefficient `k(t)` weighting the task loss.
pub fn recadam_coefficient(t: u64, anneal_a: f64, anneal_t0: u64) -> f64 {
    1.0 / (1.0 + (-anneal_a * (t as f64 - anneal_t0 as f64)).exp())
}

/// Quadratic pull toward the pretrained weights, scaled by `1 - k(t)`.
pub fn recadam_penalty(
    current: &ModelParams,
    pretrained: &ModelParams,
    t: u64,
    anneal_a: f64,
    anneal_t0: u64,
    penalty_weight: f64,
) -> (f64, Gradients) {
    let w = penalty_weight * (1.0 - recadam_coefficient(t, anneal_a, anneal_t0));
    let mut grads = current.zeros_like();
    let mut sq = 0.0;
    for (((_, g), (_, c)), (_, p)) in grads
        .tensors_mut()
        .into_iter()
        .zip(current.tensors())
        .zip(pretrained.tensors())
    {
        for i in 0..g.data.len() {
            let d = c.data[i] - p.data[i];
            sq += d * d;
            g.data[i] = w * d;
        }
    }
    (w * 0.5 * sq, grads)
}

/// Map from tensor name to parameter group (embeddings, attention, ffn,
/// layernorm, heads).
pub fn default_grouping() -> BTreeMap<String, String> {
    crate::toymodel::PARAM_NAMES
        .iter()
        .filter_map(|n| ParamGroup::of(n).map(|g| ((*n).to_owned(), g.as_str().to_owned())))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupChange {
    /// `|L1(after) - L1(before)| / L1(before)` per group.
    pub values: BTreeMap<String, f64>,
    /// Groups whose L1 norm was zero before; reported as 0.
    pub zero_baseline: Vec<String>,
}

/// Relative change of the L1 norm per group. This is a norm of values, not a
/// norm of differences: sign flips that preserve magnitudes report zero.
pub fn l1_relative_change(
    before: &ModelParams,
    after: &ModelParams,
    grouping: &BTreeMap<String, String>,
) -> GroupChange {
    let mut sums: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for ((name, b), (_, a)) in before.tensors().into_iter().zip(after.tensors()) {
        let Some(group) = grouping.get(name) else {
            continue;
        };
        let e = sums.entry(group.as_str()).or_default();
        e.0 += b.l1();
        e.1 += a.l1();
    }
    let mut out = GroupChange::default();
    for (group, (b, a)) in sums {
        if b == 0.0 {
            out.values.insert(group.to_owned(), 0.0);
            out.zero_baseline.push(group.to_owned());
        } else {
            out.values.insert(group.to_owned(), (a - b).abs() / b);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassExample {
    pub tokens: Vec<u32>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmExample {
    pub tokens: Vec<u32>,
    pub targets: Vec<Option<u32>>,
}

pub fn class_batch(examples: &[&ClassExample]) -> Batch {
    let seqs: Vec<&[u32]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
    Batch::from_sequences(&seqs, Labels::Class(examples.iter().map(|e| e.label).collect()))
}

fn mlm_batch(examples: &[&MlmExample]) -> Batch {
    let seqs: Vec<&[u32]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
    let seq = examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
    let mut targets = Vec::with_capacity(examples.len() * seq);
    for e in examples {
        targets.extend(e.targets.iter().copied());
        targets.resize(targets.len() + seq - e.targets.len(), None);
    }
    Batch::from_sequences(&seqs, Labels::Mlm(targets))
}

const EVAL_BATCH: usize = 64;

/// Argmax accuracy over `examples`. Batches may be evaluated in parallel;
/// the result is a sum of integer counts, so it does not depend on order.
pub fn evaluate_accuracy(params: &ModelParams, examples: &[ClassExample], exec: Execution) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Domain("empty evaluation set".into()));
    }
    let chunks: Vec<&[ClassExample]> = examples.chunks(EVAL_BATCH).collect();
    let counts = exec.map(&chunks, |chunk| -> Result<usize> {
        let refs: Vec<&ClassExample> = chunk.iter().collect();
        let preds = predict(params, &class_batch(&refs))?;
        Ok(preds
            .iter()
            .zip(chunk.iter())
            .filter(|(p, e)| **p == e.label)
            .count())
    });
    let mut correct = 0;
    for c in counts {
        correct += c?;
    }
    Ok(correct as f64 / examples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub eval_accuracy: f64,
    pub l1_change: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTrajectory {
    pub step_loss: Vec<f64>,
    pub initial_accuracy: f64,
    pub epochs: Vec<EpochRecord>,
    pub final_accuracy: f64,
}

impl MetricTrajectory {
    /// One row per epoch: epoch, mean loss, accuracy, then one L1 column per group.
    pub fn to_csv(&self) -> Result<String> {
        let groups: Vec<String> = self
            .epochs
            .first()
            .map(|e| e.l1_change.keys().cloned().collect())
            .unwrap_or_default();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["epoch".to_owned(), "mean_loss".into(), "eval_accuracy".into()];
        header.extend(groups.iter().map(|g| format!("l1_{g}")));
        w.write_record(&header).map_err(csv_err)?;
        for e in &self.epochs {
            let mut row = vec![
                e.epoch.to_string(),
                e.mean_loss.to_string(),
                e.eval_accuracy.to_string(),
            ];
            row.extend(
                groups
                    .iter()
                    .map(|g| e.l1_change.get(g).copied().unwrap_or(0.0).to_string()),
            );
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write_files(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(json_path, json).map_err(|e| Error::io(json_path, e))?;
        std::fs::write(csv_path, self.to_csv()?).map_err(|e| Error::io(csv_path, e))
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

fn shuffled(n: usize, seed: u64, key: &str) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut derive_substream(seed, key));
    idx
}

/// Finetunes a checkpoint on a classification set.
pub fn finetune(
    start: &Checkpoint,
    model: &ModelConfig,
    method: &FinetuneMethod,
    train: &[ClassExample],
    eval: &[ClassExample],
    config: &TrainConfig,
) -> Result<(ModelParams, MetricTrajectory)> {
    let params = checkpoint_to_params(start, model)?;
    finetune_params(&params, method, train, eval, config)
}

/// Finetuning loop on already-loaded parameters: per epoch a seeded shuffle,
/// then per mini-batch the CLS loss and gradient (plus the RecAdam terms), an
/// Adam step, and Mixout if selected. Accuracy and L1 change against `start`
/// are recorded after every epoch.
pub fn finetune_params(
    start: &ModelParams,
    method: &FinetuneMethod,
    train: &[ClassExample],
    eval: &[ClassExample],
    config: &TrainConfig,
) -> Result<(ModelParams, MetricTrajectory)> {
    config.validate()?;
    method.validate()?;
    if train.is_empty() {
        return Err(Error::Domain("empty training set".into()));
    }
    let grouping = default_grouping();
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = (steps_per_epoch * config.epochs) as u64;

    let mut params = start.clone();
    let mut state = OptimizerState::new(&params);
    let initial_accuracy = evaluate_accuracy(&params, eval, Execution::Sequential)?;
    let mut step_loss = Vec::with_capacity(total_steps as usize);
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let order = shuffled(train.len(), config.seed, &format!("shuffle/{epoch}"));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let refs: Vec<&ClassExample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, mut grads) = loss_and_backward(&params, &class_batch(&refs), Head::Cls)?;
            if let FinetuneMethod::RecAdam {
                anneal_a,
                anneal_t0,
                penalty_weight,
            } = *method
            {
                let t0 = anneal_t0.unwrap_or(total_steps / 2);
                let k = recadam_coefficient(state.t, anneal_a, t0);
                let (_, pen) = recadam_penalty(&params, start, state.t, anneal_a, t0, penalty_weight);
                grads.zip_mut(&pen, |_, g, pg| {
                    for (gi, &pi) in g.data.iter_mut().zip(&pg.data) {
                        *gi = k * *gi + pi;
                    }
                });
            }
            adam_step(&mut params, &grads, &mut state, config)?;
            if let FinetuneMethod::Mixout { p } = *method {
                mixout_apply(&mut params, start, p, config.seed, state.t);
            }
            step_loss.push(loss);
            epoch_loss += loss;
        }
        epochs.push(EpochRecord {
            epoch: epoch + 1,
            mean_loss: epoch_loss / steps_per_epoch as f64,
            eval_accuracy: evaluate_accuracy(&params, eval, Execution::Sequential)?,
            l1_change: l1_relative_change(start, &params, &grouping).values,
        });
    }
    let final_accuracy = epochs.last().map_or(initial_accuracy, |e| e.eval_accuracy);
    Ok((
        params,
        MetricTrajectory {
            step_loss,
            initial_accuracy,
            epochs,
            final_accuracy,
        },
    ))
}

/// Masked-token pretraining. `type_embedding` stays frozen so it remains an
/// exact constant. Returns the trained parameters and the per-epoch mean loss.
pub fn pretrain_mlm(
    start: &ModelParams,
    corpus: &[MlmExample],
    config: &TrainConfig,
) -> Result<(ModelParams, Vec<f64>)> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Domain("empty pretraining corpus".into()));
    }
    let mut params = start.clone();
    let mut state = OptimizerState::new(&params);
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = shuffled(corpus.len(), config.seed, &format!("pretrain-shuffle/{epoch}"));
        let (mut total, mut n) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let refs: Vec<&MlmExample> = chunk.iter().map(|&i| &corpus[i]).collect();
            let batch = mlm_batch(&refs);
            let has_targets = matches!(&batch.labels, Labels::Mlm(t) if t.iter().any(Option::is_some));
            if !has_targets {
                continue;
            }
            let (loss, mut grads) = loss_and_backward(&params, &batch, Head::Mlm)?;
            grads.type_embedding.data.fill(0.0);
            adam_step(&mut params, &grads, &mut state, config)?;
            total += loss;
            n += 1;
        }
        if n == 0 {
            return Err(Error::Domain("pretraining corpus has no masked targets".into()));
        }
        losses.push(total / n as f64);
    }
    Ok((params, losses))
}
