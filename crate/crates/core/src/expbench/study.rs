use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::data::{gen_downstream, gen_pretrain_corpus, subsample, DownstreamData};
use super::ScenarioSpec;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::perturb::{perturb_checkpoint_with, NoiseDistribution, NoiseScope, NoiseSpec};
use crate::rng::child_seed;
use crate::tensorstore::Checkpoint;
use crate::toymodel::{checkpoint_to_params, init_params, params_to_checkpoint, ModelParams, ParamGroup};
use crate::trainkit::{
    csv_err, evaluate_accuracy, finetune_params, pretrain_mlm, FinetuneMethod, MetricTrajectory, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyName {
    Main,
    NoiseTypes,
    Combination,
    DataFraction,
    NormTracking,
    LambdaSweep,
}

impl StudyName {
    pub const ALL: [StudyName; 6] = [
        StudyName::Main,
        StudyName::NoiseTypes,
        StudyName::Combination,
        StudyName::DataFraction,
        StudyName::NormTracking,
        StudyName::LambdaSweep,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            StudyName::Main => "main",
            StudyName::NoiseTypes => "noise-types",
            StudyName::Combination => "combination",
            StudyName::DataFraction => "data-fraction",
            StudyName::NormTracking => "norm-tracking",
            StudyName::LambdaSweep => "lambda-sweep",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.map(|s| s.as_str()).join(", ")
    }
}

impl fmt::Display for StudyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StudyName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|n| n.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown study '{s}'; valid studies: {}",
                Self::valid_names()
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StartPoint {
    Pretrained,
    RandomInit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionNoise {
    pub lambda: f64,
    pub distribution: NoiseDistribution,
    pub scope: NoiseScope,
}

/// One arm of a study. Arms differ only in these fields; data, data order
/// and finetuning config are shared per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub label: String,
    pub start: StartPoint,
    pub noise: Option<ConditionNoise>,
    pub method: FinetuneMethod,
    pub fraction: f64,
}

impl Condition {
    pub fn baseline(label: impl Into<String>) -> Self {
        Condition {
            label: label.into(),
            start: StartPoint::Pretrained,
            noise: None,
            method: FinetuneMethod::Vanilla,
            fraction: 1.0,
        }
    }

    pub fn noisy(label: impl Into<String>, lambda: f64) -> Self {
        Self::baseline(label).with_noise(lambda, NoiseDistribution::Uniform, NoiseScope::Matrix)
    }

    pub fn with_noise(mut self, lambda: f64, distribution: NoiseDistribution, scope: NoiseScope) -> Self {
        self.noise = Some(ConditionNoise {
            lambda,
            distribution,
            scope,
        });
        self
    }

    pub fn with_method(mut self, method: FinetuneMethod) -> Self {
        self.method = method;
        self
    }

    pub fn with_fraction(mut self, fraction: f64) -> Self {
        self.fraction = fraction;
        self
    }

    pub fn from_random_init(mut self) -> Self {
        self.start = StartPoint::RandomInit;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub n_train: usize,
    pub final_accuracy: f64,
    /// Largest absolute parameter change from the run's starting point.
    pub max_abs_change: f64,
    pub trajectory: MetricTrajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub condition: Condition,
    pub per_seed: Vec<SeedRun>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

impl RunResult {
    pub fn accuracies(&self) -> Vec<f64> {
        self.per_seed.iter().map(|r| r.final_accuracy).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub condition: String,
    pub lambda: Option<f64>,
    pub fraction: Option<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub n_seeds: usize,
    pub baseline: Option<String>,
    pub mean_paired_diff: Option<f64>,
    pub std_paired_diff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDiff {
    pub condition: String,
    pub baseline: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Reported quantity that is not asserted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub name: String,
    pub value: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormRow {
    pub condition: String,
    pub epoch: usize,
    pub group: String,
    pub mean_change: f64,
    pub std_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub study: StudyName,
    pub spec_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<SummaryRow>,
    pub paired: Vec<PairedDiff>,
    pub checks: Vec<Check>,
    pub findings: Vec<Finding>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub norm: Vec<NormRow>,
    pub runs: Vec<RunResult>,
}

impl StudyReport {
    pub fn row(&self, condition: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.condition == condition)
    }

    pub fn run(&self, condition: &str) -> Option<&RunResult> {
        self.runs.iter().find(|r| r.condition.label == condition)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn finding(&self, name: &str) -> Option<&Finding> {
        self.findings.iter().find(|c| c.name == name)
    }

    pub fn paired(&self, condition: &str, baseline: &str) -> Option<&PairedDiff> {
        self.paired
            .iter()
            .find(|p| p.condition == condition && p.baseline == baseline)
    }

    /// The study's table as CSV: per-group norm changes for norm tracking,
    /// the summary rows otherwise.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        if self.study == StudyName::NormTracking {
            w.write_record(["condition", "epoch", "group", "mean_change", "std_change"])
                .map_err(csv_err)?;
            for r in &self.norm {
                w.write_record([
                    r.condition.clone(),
                    r.epoch.to_string(),
                    r.group.clone(),
                    r.mean_change.to_string(),
                    r.std_change.to_string(),
                ])
                .map_err(csv_err)?;
            }
        } else {
            w.write_record([
                "condition",
                "lambda",
                "fraction",
                "mean_accuracy",
                "std_accuracy",
                "n_seeds",
                "baseline",
                "mean_paired_diff",
                "std_paired_diff",
            ])
            .map_err(csv_err)?;
            for r in &self.rows {
                w.write_record([
                    r.condition.clone(),
                    opt(r.lambda),
                    opt(r.fraction),
                    r.mean_accuracy.to_string(),
                    r.std_accuracy.to_string(),
                    r.n_seeds.to_string(),
                    r.baseline.clone().unwrap_or_default(),
                    opt(r.mean_paired_diff),
                    opt(r.std_paired_diff),
                ])
                .map_err(csv_err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; 0 when either side
/// is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, _) = mean_std(&rx);
    let (my, _) = mean_std(&ry);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Pretrains the scenario's model on its masked-token corpus. Returns the
/// checkpoint and the per-epoch mean loss.
pub fn pretrain(spec: &ScenarioSpec) -> Result<(Checkpoint, Vec<f64>)> {
    spec.validate()?;
    let corpus = gen_pretrain_corpus(spec, child_seed(spec.world_seed, "corpus"))?;
    let init = init_params(&spec.model, child_seed(spec.world_seed, "init"))?;
    let config = TrainConfig {
        seed: child_seed(spec.world_seed, "pretrain"),
        ..spec.pretrain.clone()
    };
    let (params, losses) = pretrain_mlm(&init, &corpus.examples, &config)?;
    let mut ckpt = params_to_checkpoint(&params);
    ckpt.metadata.insert("scenario_hash".into(), spec.content_hash());
    ckpt.metadata.insert(
        "pretrain_final_loss".into(),
        losses.last().copied().unwrap_or(f64::NAN).to_string(),
    );
    Ok((ckpt, losses))
}

const LAMBDA_ZERO: &str = "lambda-zero";
const NO_NOISE: &str = "no-noise";
const NOISYTUNE: &str = "noisytune";

fn lambda_label(l: f64) -> String {
    format!("lambda={l}")
}

/// A scenario with its pretrained checkpoint and per-seed downstream data.
pub struct Bench {
    spec: ScenarioSpec,
    pretrained: Checkpoint,
    data: Vec<DownstreamData>,
    exec: Execution,
}

impl Bench {
    /// Pretrains, then generates the per-seed downstream data.
    pub fn new(spec: ScenarioSpec, exec: Execution) -> Result<Self> {
        let (ckpt, _) = pretrain(&spec)?;
        Self::with_checkpoint(spec, ckpt, exec)
    }

    pub fn with_checkpoint(spec: ScenarioSpec, pretrained: Checkpoint, exec: Execution) -> Result<Self> {
        spec.validate()?;
        checkpoint_to_params(&pretrained, &spec.model)?;
        let data = exec
            .map(&spec.seeds, |&s| {
                gen_downstream(&spec, child_seed(s, "downstream"))
            })
            .into_iter()
            .collect::<Result<_>>()?;
        Ok(Bench {
            spec,
            pretrained,
            data,
            exec,
        })
    }

    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    pub fn pretrained(&self) -> &Checkpoint {
        &self.pretrained
    }

    pub fn data(&self) -> &[DownstreamData] {
        &self.data
    }

    /// Same scenario and data with a different executor.
    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn random_init(&self, seed: u64) -> Result<ModelParams> {
        init_params(&self.spec.model, child_seed(seed, "random-init"))
    }

    fn run_one(&self, cond: &Condition, seed_idx: usize) -> Result<SeedRun> {
        let seed = self.spec.seeds[seed_idx];
        let data = &self.data[seed_idx];
        let train = subsample(&data.train, cond.fraction, child_seed(seed, "fraction"));
        let base = match cond.start {
            StartPoint::Pretrained => self.pretrained.clone(),
            StartPoint::RandomInit => params_to_checkpoint(&self.random_init(seed)?),
        };
        let start_ckpt = match &cond.noise {
            Some(n) => {
                let spec = NoiseSpec {
                    lambda: n.lambda,
                    distribution: n.distribution,
                    scope: n.scope,
                    exclude: self.spec.noise.exclude.clone(),
                    seed: child_seed(seed, "noise"),
                };
                perturb_checkpoint_with(&base, &spec, Execution::Sequential)?.0
            }
            None => base,
        };
        let start = checkpoint_to_params(&start_ckpt, &self.spec.model)?;
        let config = TrainConfig {
            seed: child_seed(seed, "finetune"),
            ..self.spec.finetune.clone()
        };
        let (params, trajectory) = finetune_params(&start, &cond.method, &train, &data.eval, &config)?;
        let max_abs_change = params
            .tensors()
            .iter()
            .zip(start.tensors().iter())
            .flat_map(|((_, a), (_, b))| a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        Ok(SeedRun {
            seed,
            n_train: train.len(),
            final_accuracy: trajectory.final_accuracy,
            max_abs_change,
            trajectory,
        })
    }

    /// Runs every (condition, seed) pair, in parallel when the executor
    /// allows. Results come back in condition order, seeds in spec order.
    pub fn run_conditions(&self, conditions: &[Condition]) -> Result<Vec<RunResult>> {
        let n_seeds = self.spec.seeds.len();
        let jobs: Vec<(usize, usize)> = (0..conditions.len())
            .flat_map(|c| (0..n_seeds).map(move |s| (c, s)))
            .collect();
        let mut results = self
            .exec
            .map(&jobs, |&(c, s)| self.run_one(&conditions[c], s))
            .into_iter();
        conditions
            .iter()
            .map(|cond| {
                let per_seed = results.by_ref().take(n_seeds).collect::<Result<Vec<_>>>()?;
                let (mean_accuracy, std_accuracy) =
                    mean_std(&per_seed.iter().map(|r| r.final_accuracy).collect::<Vec<_>>());
                Ok(RunResult {
                    condition: cond.clone(),
                    per_seed,
                    mean_accuracy,
                    std_accuracy,
                })
            })
            .collect()
    }

    pub fn run_study(&self, study: StudyName) -> Result<StudyReport> {
        match study {
            StudyName::Main => self.main_comparison(),
            StudyName::NoiseTypes => self.noise_type_study(),
            StudyName::Combination => self.combination_study(),
            StudyName::DataFraction => self.data_fraction_study(&self.spec.studies.fractions),
            StudyName::NormTracking => self.norm_tracking(),
            StudyName::LambdaSweep => {
                let mut grid = self.spec.studies.lambda_grid.clone();
                grid.extend(&self.spec.studies.sweep_extra);
                self.lambda_sweep(&grid)
            }
        }
    }

    fn report(&self, study: StudyName) -> StudyReport {
        StudyReport {
            study,
            spec_hash: self.spec.content_hash(),
            seeds: self.spec.seeds.clone(),
            rows: Vec::new(),
            paired: Vec::new(),
            checks: Vec::new(),
            findings: Vec::new(),
            norm: Vec::new(),
            runs: Vec::new(),
        }
    }

    /// {no-noise, NoisyTune, extra intensities, random init}.
    pub fn main_comparison(&self) -> Result<StudyReport> {
        let s = &self.spec.studies;
        let mut conds = vec![
            Condition::baseline(NO_NOISE),
            Condition::noisy(NOISYTUNE, self.spec.noise.lambda),
        ];
        conds.extend(
            s.main_extra
                .iter()
                .map(|&l| Condition::noisy(format!("{NOISYTUNE}-{}", lambda_label(l)), l)),
        );
        conds.push(Condition::baseline("random-init").from_random_init());
        conds.push(Condition::noisy(LAMBDA_ZERO, 0.0));
        let runs = self.run_conditions(&conds)?;
        let mut rep = self.report(StudyName::Main);
        let (check_run, shown) = runs.split_last().expect("conditions are nonempty");
        rep.checks.push(identity_check(&shown[0], check_run));
        for r in shown {
            let lambda = r.condition.noise.as_ref().map(|n| n.lambda);
            push_row(
                &mut rep,
                r,
                lambda,
                None,
                (r.condition.label != NO_NOISE).then_some(&shown[0]),
            );
        }
        self.sanity_checks(&mut rep, &shown[0], shown.last().expect("random-init run"))?;
        rep.runs = runs;
        Ok(rep)
    }

    fn sanity_checks(&self, rep: &mut StudyReport, pretrained: &RunResult, random: &RunResult) -> Result<()> {
        let k = self.spec.model.n_classes as f64;
        let chance = 1.0 / k;
        let n_eval = self.spec.downstream.n_eval as f64;
        let sigma = (chance * (1.0 - chance) / n_eval).sqrt();
        let untrained = self
            .exec
            .map(&(0..self.spec.seeds.len()).collect::<Vec<_>>(), |&i| {
                let p = self.random_init(self.spec.seeds[i])?;
                evaluate_accuracy(&p, &self.data[i].eval, Execution::Sequential)
            })
            .into_iter()
            .collect::<Result<Vec<f64>>>()?;
        // Each untrained model is a fixed random function whose accuracy
        // scatters around chance by more than binomial noise, so the test is
        // on the seed average with the larger of the two standard errors.
        let n = untrained.len() as f64;
        let (mean_untrained, sd_untrained) = mean_std(&untrained);
        let se = (sigma / n.sqrt()).max(sd_untrained / n.sqrt());
        let worst = untrained.iter().map(|a| (a - chance).abs()).fold(0.0, f64::max);
        rep.checks.push(Check {
            name: "untrained-random-near-chance".into(),
            passed: (mean_untrained - chance).abs() <= 3.0 * se,
            detail: format!(
                "mean untrained accuracy {mean_untrained:.4} vs chance {chance}: |diff| = {:.4}, 3 sigma = {:.4}; \
                 largest single-seed deviation {worst:.4}",
                (mean_untrained - chance).abs(),
                3.0 * se
            ),
        });
        rep.findings.push(Finding {
            name: "untrained-random-accuracy".into(),
            value: mean_untrained,
            detail: "seed-averaged accuracy of freshly initialized models without training".into(),
        });
        let gap = pretrained.mean_accuracy - random.mean_accuracy;
        rep.checks.push(Check {
            name: "pretraining-useful".into(),
            passed: gap >= 0.05,
            detail: format!(
                "pretrained {:.4} vs random init {:.4}: gap {gap:.4} (needs >= 0.05)",
                pretrained.mean_accuracy, random.mean_accuracy
            ),
        });
        Ok(())
    }

    /// No noise plus the four distribution and scope combinations at the default intensity, in fixed order.
    pub fn noise_type_study(&self) -> Result<StudyReport> {
        use NoiseDistribution::{Gaussian, Uniform};
        use NoiseScope::{Global, Matrix};
        let l = self.spec.noise.lambda;
        let conds = vec![
            Condition::baseline(NO_NOISE),
            Condition::baseline("global-gaussian").with_noise(l, Gaussian, Global),
            Condition::baseline("global-uniform").with_noise(l, Uniform, Global),
            Condition::baseline("matrix-gaussian").with_noise(l, Gaussian, Matrix),
            Condition::baseline("matrix-uniform").with_noise(l, Uniform, Matrix),
            Condition::noisy(LAMBDA_ZERO, 0.0),
        ];
        let runs = self.run_conditions(&conds)?;
        let mut rep = self.report(StudyName::NoiseTypes);
        rep.checks.push(identity_check(&runs[0], &runs[5]));
        for r in &runs[..5] {
            let lambda = r.condition.noise.as_ref().map(|n| n.lambda);
            push_row(
                &mut rep,
                r,
                lambda,
                None,
                (r.condition.label != NO_NOISE).then_some(&runs[0]),
            );
        }
        for (global, matrix) in [(&runs[1], &runs[3]), (&runs[2], &runs[4])] {
            rep.paired.push(paired(global, matrix));
        }
        rep.runs = runs;
        Ok(rep)
    }

    /// {Vanilla, Mixout, RecAdam} without and with NoisyTune.
    pub fn combination_study(&self) -> Result<StudyReport> {
        let s = &self.spec.studies;
        let l = self.spec.noise.lambda;
        let mut conds = Vec::new();
        for m in [FinetuneMethod::Vanilla, s.mixout.clone(), s.recadam.clone()] {
            let name = m.label();
            conds.push(Condition::baseline(name).with_method(m.clone()));
            conds.push(Condition::noisy(format!("{name}+{NOISYTUNE}"), l).with_method(m));
        }
        conds.push(Condition::noisy(LAMBDA_ZERO, 0.0));
        conds.push(Condition::baseline("mixout-p1").with_method(FinetuneMethod::Mixout { p: 1.0 }));
        let runs = self.run_conditions(&conds)?;
        let mut rep = self.report(StudyName::Combination);
        rep.checks.push(identity_check(&runs[0], &runs[6]));
        let p1 = &runs[7];
        let projected = p1
            .per_seed
            .iter()
            .all(|r| r.max_abs_change == 0.0 && r.final_accuracy == r.trajectory.initial_accuracy);
        rep.checks.push(Check {
            name: "mixout-p1-projection".into(),
            passed: projected,
            detail: "mixout with p = 1 returns the pretrained parameters and their accuracy on every seed"
                .into(),
        });
        for pair in runs[..6].chunks(2) {
            push_row(&mut rep, &pair[0], None, None, None);
            push_row(&mut rep, &pair[1], Some(l), None, Some(&pair[0]));
        }
        rep.runs = runs;
        Ok(rep)
    }

    /// No-noise and NoisyTune at each training-set fraction.
    pub fn data_fraction_study(&self, fractions: &[f64]) -> Result<StudyReport> {
        let l = self.spec.noise.lambda;
        let mut conds = Vec::new();
        for &f in fractions {
            conds.push(Condition::baseline(format!("{NO_NOISE}@{f}")).with_fraction(f));
            conds.push(Condition::noisy(format!("{NOISYTUNE}@{f}"), l).with_fraction(f));
            conds.push(Condition::noisy(format!("{LAMBDA_ZERO}@{f}"), 0.0).with_fraction(f));
        }
        let runs = self.run_conditions(&conds)?;
        let mut rep = self.report(StudyName::DataFraction);
        let mut curves: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for (triple, &f) in runs.chunks(3).zip(fractions) {
            let mut check = identity_check(&triple[0], &triple[2]);
            check.name = format!("{LAMBDA_ZERO}-equals-{NO_NOISE}@{f}");
            rep.checks.push(check);
            push_row(&mut rep, &triple[0], None, Some(f), None);
            push_row(&mut rep, &triple[1], Some(l), Some(f), Some(&triple[0]));
            curves.entry(NO_NOISE).or_default().push(triple[0].mean_accuracy);
            curves.entry(NOISYTUNE).or_default().push(triple[1].mean_accuracy);
        }
        for (cond, curve) in curves {
            rep.findings.push(Finding {
                name: format!("spearman-{cond}"),
                value: spearman(fractions, &curve),
                detail: "rank correlation between training fraction and seed-averaged accuracy".into(),
            });
        }
        rep.runs = runs;
        Ok(rep)
    }

    /// Per-epoch L1 relative change per parameter group, each run measured
    /// against its own starting point.
    pub fn norm_tracking(&self) -> Result<StudyReport> {
        let l = self.spec.noise.lambda;
        let conds = vec![
            Condition::baseline(NO_NOISE),
            Condition::noisy(NOISYTUNE, l),
            Condition::noisy(LAMBDA_ZERO, 0.0),
        ];
        let runs = self.run_conditions(&conds)?;
        let mut rep = self.report(StudyName::NormTracking);
        rep.checks.push(identity_check(&runs[0], &runs[2]));
        push_row(&mut rep, &runs[0], None, None, None);
        push_row(&mut rep, &runs[1], Some(l), None, Some(&runs[0]));
        let epochs = self.spec.finetune.epochs;
        let mut finals: BTreeMap<&str, [f64; 2]> = BTreeMap::new();
        for (k, r) in runs[..2].iter().enumerate() {
            for group in ParamGroup::ALL {
                let g = group.as_str();
                rep.norm.push(NormRow {
                    condition: r.condition.label.clone(),
                    epoch: 0,
                    group: g.into(),
                    mean_change: 0.0,
                    std_change: 0.0,
                });
                for e in 1..=epochs {
                    let xs: Vec<f64> = r
                        .per_seed
                        .iter()
                        .map(|s| {
                            s.trajectory.epochs[e - 1]
                                .l1_change
                                .get(g)
                                .copied()
                                .unwrap_or(0.0)
                        })
                        .collect();
                    let (mean_change, std_change) = mean_std(&xs);
                    if e == epochs {
                        finals.entry(g).or_default()[k] = mean_change;
                    }
                    rep.norm.push(NormRow {
                        condition: r.condition.label.clone(),
                        epoch: e,
                        group: g.into(),
                        mean_change,
                        std_change,
                    });
                }
            }
        }
        for (g, [base, noisy]) in finals {
            let diff = noisy - base;
            rep.findings.push(Finding {
                name: format!("final-change-diff-{g}"),
                value: diff,
                detail: format!(
                    "{NOISYTUNE} {noisy:.6} vs {NO_NOISE} {base:.6}: {} under {NOISYTUNE}",
                    if diff <= 0.0 { "smaller or equal" } else { "larger" }
                ),
            });
        }
        rep.runs = runs;
        Ok(rep)
    }

    /// One row per intensity; a separate no-noise run backs the λ = 0 check.
    pub fn lambda_sweep(&self, grid: &[f64]) -> Result<StudyReport> {
        let mut conds: Vec<Condition> = grid
            .iter()
            .map(|&l| Condition::noisy(lambda_label(l), l))
            .collect();
        conds.push(Condition::baseline(NO_NOISE));
        let has_zero = grid.contains(&0.0);
        if !has_zero {
            conds.push(Condition::noisy(LAMBDA_ZERO, 0.0));
        }
        let runs = self.run_conditions(&conds)?;
        let mut rep = self.report(StudyName::LambdaSweep);
        let base = &runs[grid.len()];
        let zero = if has_zero {
            &runs[grid.iter().position(|&l| l == 0.0).expect("grid has zero")]
        } else {
            &runs[grid.len() + 1]
        };
        rep.checks.push(identity_check(base, zero));
        for (r, &l) in runs.iter().zip(grid) {
            push_row(&mut rep, r, Some(l), None, Some(base));
        }
        rep.runs = runs;
        Ok(rep)
    }
}

fn paired(cond: &RunResult, base: &RunResult) -> PairedDiff {
    let per_seed: Vec<f64> = cond
        .per_seed
        .iter()
        .zip(&base.per_seed)
        .map(|(a, b)| a.final_accuracy - b.final_accuracy)
        .collect();
    let (mean, std) = mean_std(&per_seed);
    PairedDiff {
        condition: cond.condition.label.clone(),
        baseline: base.condition.label.clone(),
        per_seed,
        mean,
        std,
    }
}

fn push_row(
    rep: &mut StudyReport,
    r: &RunResult,
    lambda: Option<f64>,
    fraction: Option<f64>,
    base: Option<&RunResult>,
) {
    let diff = base.map(|b| paired(r, b));
    rep.rows.push(SummaryRow {
        condition: r.condition.label.clone(),
        lambda,
        fraction,
        mean_accuracy: r.mean_accuracy,
        std_accuracy: r.std_accuracy,
        n_seeds: r.per_seed.len(),
        baseline: diff.as_ref().map(|d| d.baseline.clone()),
        mean_paired_diff: diff.as_ref().map(|d| d.mean),
        std_paired_diff: diff.as_ref().map(|d| d.std),
    });
    if let Some(d) = diff {
        rep.paired.push(d);
    }
}

/// Exact equality of per-seed accuracies and full trajectories.
fn identity_check(baseline: &RunResult, zero: &RunResult) -> Check {
    let same = baseline.per_seed.len() == zero.per_seed.len()
        && baseline.per_seed.iter().zip(&zero.per_seed).all(|(a, b)| {
            a.final_accuracy.to_bits() == b.final_accuracy.to_bits() && a.trajectory == b.trajectory
        });
    Check {
        name: format!("{LAMBDA_ZERO}-equals-{NO_NOISE}"),
        passed: same,
        detail: format!(
            "{} vs {}: per-seed accuracies and trajectories {}",
            zero.condition.label,
            baseline.condition.label,
            if same { "identical" } else { "differ" }
        ),
    }
}
