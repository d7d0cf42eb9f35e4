//! Matrix-wise noise injection into a checkpoint before finetuning.
//!
//! Each tensor `W` is replaced by `W + U(-λ/2, λ/2) * std(W)`, with an
//! independent draw per element and `std` the Bessel-corrected sample standard
//! deviation of that tensor. Constant tensors have zero spread and are left
//! alone. The ablation variants swap the uniform draw for a Gaussian of equal
//! variance, or replace the per-tensor scale by one pooled over the whole
//! checkpoint.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ValidationError};
use crate::exec::Execution;
use crate::rng::derive_substream;
use crate::tensorstore::{Checkpoint, NamedTensor};

pub const DEFAULT_LAMBDA: f64 = 0.15;
/// Intensity used for multilingual models, where token embeddings are excluded.
pub const MULTILINGUAL_LAMBDA: f64 = 0.1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseDistribution {
    #[default]
    Uniform,
    Gaussian,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseScope {
    #[default]
    #[serde(alias = "matrixwise", alias = "matrix-wise")]
    Matrix,
    Global,
}

impl fmt::Display for NoiseDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseDistribution::Uniform => "uniform",
            NoiseDistribution::Gaussian => "gaussian",
        })
    }
}

impl fmt::Display for NoiseScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseScope::Matrix => "matrix",
            NoiseScope::Global => "global",
        })
    }
}

impl FromStr for NoiseDistribution {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(Self::Uniform),
            "gaussian" | "normal" => Ok(Self::Gaussian),
            other => Err(format!("unknown distribution {other:?} (uniform|gaussian)")),
        }
    }
}

impl FromStr for NoiseScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "matrix" | "matrixwise" | "matrix-wise" => Ok(Self::Matrix),
            "global" => Ok(Self::Global),
            other => Err(format!("unknown scope {other:?} (matrix|global)")),
        }
    }
}

/// Glob-style tensor-name pattern. `*` matches any run of characters
/// (including none); every other character matches itself. The whole name
/// must match. `?`, `[` and `]` are reserved and rejected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NamePattern(String);

impl NamePattern {
    pub fn parse(s: &str) -> Result<Self, ValidationError> {
        if s.is_empty() || s.contains(['?', '[', ']']) {
            return Err(ValidationError::InvalidPattern(s.to_owned()));
        }
        Ok(NamePattern(s.to_owned()))
    }

    pub fn matches(&self, name: &str) -> bool {
        glob_match(self.0.as_bytes(), name.as_bytes())
    }
}

fn glob_match(pat: &[u8], text: &[u8]) -> bool {
    let (mut p, mut t) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while t < text.len() {
        if p < pat.len() && pat[p] == b'*' {
            star = Some((p, t));
            p += 1;
        } else if p < pat.len() && pat[p] == text[t] {
            p += 1;
            t += 1;
        } else if let Some((sp, st)) = star {
            // backtrack: let the last star absorb one more byte
            p = sp + 1;
            t = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    pat[p..].iter().all(|&c| c == b'*')
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub distribution: NoiseDistribution,
    #[serde(default)]
    pub scope: NoiseScope,
    #[serde(default)]
    pub exclude: Vec<String>,
    #[serde(default)]
    pub seed: u64,
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            lambda: DEFAULT_LAMBDA,
            distribution: NoiseDistribution::Uniform,
            scope: NoiseScope::Matrix,
            exclude: Vec::new(),
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn uniform(lambda: f64, seed: u64) -> Self {
        NoiseSpec {
            lambda,
            seed,
            ..Self::default()
        }
    }

    pub fn with(mut self, distribution: NoiseDistribution, scope: NoiseScope) -> Self {
        self.distribution = distribution;
        self.scope = scope;
        self
    }

    pub fn excluding(mut self, pattern: impl Into<String>) -> Self {
        self.exclude.push(pattern.into());
        self
    }

    pub fn patterns(&self) -> Result<Vec<NamePattern>, ValidationError> {
        self.exclude.iter().map(|p| NamePattern::parse(p)).collect()
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(ValidationError::OutOfRange {
                field: "lambda",
                requirement: "a finite number >= 0",
                value: self.lambda.to_string(),
            });
        }
        self.patterns().map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbStatus {
    Perturbed,
    SkippedZeroStd,
    SkippedExcluded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    /// Spread the noise was scaled by: the tensor's own std (matrix scope) or
    /// the pooled std (global scope). Zero for excluded tensors.
    pub std: f64,
    /// `lambda * std`: width of the uniform range, `sqrt(12)` times the
    /// Gaussian sigma.
    pub scale: f64,
    pub status: PerturbStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbReport {
    pub tensors: Vec<TensorRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pooled_std: Option<f64>,
    pub spec: NoiseSpec,
    pub seed: u64,
}

impl PerturbReport {
    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|r| r.name == name)
    }

    pub fn count(&self, status: PerturbStatus) -> usize {
        self.tensors.iter().filter(|r| r.status == status).count()
    }
}

/// Welford accumulator; exact zero variance for constant input.
#[derive(Debug, Clone, Copy, Default)]
struct RunningStats {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn sample_std(&self) -> f64 {
        if self.n <= 1 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64).max(0.0).sqrt()
        }
    }
}

/// Bessel-corrected sample standard deviation over all elements; zero for a
/// single element or a constant tensor.
pub fn tensor_std(t: &NamedTensor) -> f64 {
    let mut stats = RunningStats::default();
    t.data.iter().for_each(|&x| stats.push(x as f64));
    stats.sample_std()
}

fn is_excluded(name: &str, patterns: &[NamePattern]) -> bool {
    patterns.iter().any(|p| p.matches(name))
}

/// Sample std over the concatenation of every non-excluded tensor.
///
/// Tensors are pooled in name order so the result does not depend on the
/// checkpoint's insertion order.
pub fn pooled_std(ckpt: &Checkpoint, exclude: &[NamePattern]) -> Result<f64> {
    let mut pool: Vec<&NamedTensor> = ckpt
        .tensors
        .iter()
        .filter(|t| !is_excluded(&t.name, exclude))
        .collect();
    pool.sort_by(|a, b| a.name.cmp(&b.name));
    let mut stats = RunningStats::default();
    for t in pool {
        t.data.iter().for_each(|&x| stats.push(x as f64));
    }
    if stats.n == 0 {
        return Err(Error::Domain(
            "global noise scale needs at least one non-excluded element".into(),
        ));
    }
    Ok(stats.sample_std())
}

/// Rounds `w + delta` to f32, stepping back toward `w` when rounding would
/// land outside `|result - w| <= bound`.
fn add_within(w: f32, delta: f64, bound: Option<f64>) -> f32 {
    if delta == 0.0 {
        return w;
    }
    let mut out = (w as f64 + delta) as f32;
    if let Some(bound) = bound {
        while (out as f64 - w as f64).abs() > bound {
            out = if out > w { out.next_down() } else { out.next_up() };
        }
    }
    out
}

fn apply_noise(t: &NamedTensor, spec: &NoiseSpec, std: f64) -> NamedTensor {
    let scale = spec.lambda * std;
    if scale == 0.0 {
        return t.clone();
    }
    let mut rng = derive_substream(spec.seed, &t.name);
    let data = match spec.distribution {
        NoiseDistribution::Uniform => {
            let bound = 0.5 * spec.lambda * std;
            t.data
                .iter()
                .map(|&w| {
                    let u = (rng.unit_f64() - 0.5) * spec.lambda;
                    add_within(w, u * std, Some(bound))
                })
                .collect()
        }
        NoiseDistribution::Gaussian => {
            let sigma = scale / 12f64.sqrt();
            t.data
                .iter()
                .map(|&w| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    add_within(w, z * sigma, None)
                })
                .collect()
        }
    };
    NamedTensor {
        name: t.name.clone(),
        shape: t.shape.clone(),
        data,
    }
}

pub fn perturb_checkpoint(ckpt: &Checkpoint, spec: &NoiseSpec) -> Result<(Checkpoint, PerturbReport)> {
    perturb_checkpoint_with(ckpt, spec, Execution::default())
}

/// Perturbs every tensor of `ckpt` according to `spec`; the input is not
/// modified. Parallel and sequential execution give identical results since
/// each tensor draws from its own `(seed, name)` substream.
pub fn perturb_checkpoint_with(
    ckpt: &Checkpoint,
    spec: &NoiseSpec,
    exec: Execution,
) -> Result<(Checkpoint, PerturbReport)> {
    ckpt.validate()?;
    spec.validate()?;
    let patterns = spec.patterns()?;
    if spec.lambda > 0.0 {
        if let Some(t) = ckpt
            .tensors
            .iter()
            .find(|t| !is_excluded(&t.name, &patterns) && t.data.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::NonFinite(t.name.clone()));
        }
    }
    let pooled = match spec.scope {
        NoiseScope::Global => Some(pooled_std(ckpt, &patterns)?),
        NoiseScope::Matrix => None,
    };

    let results = exec.map(&ckpt.tensors, |t| {
        if is_excluded(&t.name, &patterns) {
            let rec = TensorRecord {
                name: t.name.clone(),
                std: 0.0,
                scale: 0.0,
                status: PerturbStatus::SkippedExcluded,
            };
            return (t.clone(), rec);
        }
        let std = pooled.unwrap_or_else(|| tensor_std(t));
        if pooled.is_none() && std == 0.0 {
            let rec = TensorRecord {
                name: t.name.clone(),
                std: 0.0,
                scale: 0.0,
                status: PerturbStatus::SkippedZeroStd,
            };
            return (t.clone(), rec);
        }
        let rec = TensorRecord {
            name: t.name.clone(),
            std,
            scale: spec.lambda * std,
            status: PerturbStatus::Perturbed,
        };
        (apply_noise(t, spec, std), rec)
    });

    let (tensors, records): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let mut metadata = ckpt.metadata.clone();
    metadata.insert(
        "perturbation".into(),
        format!(
            "lambda={} distribution={} scope={} seed={}",
            spec.lambda, spec.distribution, spec.scope, spec.seed
        ),
    );
    let report = PerturbReport {
        tensors: records,
        pooled_std: pooled,
        spec: spec.clone(),
        seed: spec.seed,
    };
    Ok((Checkpoint { tensors, metadata }, report))
}
