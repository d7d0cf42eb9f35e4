//! Synthetic pretrain/downstream scenarios and the experiment studies run on
//! them.
//!
//! A scenario fixes a "world": a vocabulary split into token buckets, an
//! order-1 Markov chain used for masked-token pretraining, and a second chain
//! for the downstream task whose transition rows are interpolated toward an
//! independent chain by the gap parameter `delta`. Downstream labels come from
//! bucket counts, so pretraining on the first chain yields transferable
//! features.

mod data;
mod output;
mod study;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result, ValidationError};
use crate::perturb::DEFAULT_LAMBDA;
use crate::toymodel::{InitProfile, ModelConfig};
use crate::trainkit::{FinetuneMethod, SearchGrid, TrainConfig};

pub use data::{
    bigram_tv, gen_downstream, gen_pretrain_corpus, label_of, subsample, tv_distance, unigram_frequencies,
    DownstreamData, MarkovChain, PretrainCorpus, World,
};
pub use output::{read_manifest, read_study, render_report, write_study, Manifest, ManifestEntry};
pub use study::{
    pretrain, spearman, Bench, Check, Condition, ConditionNoise, Finding, NormRow, PairedDiff, RunResult,
    SeedRun, StartPoint, StudyName, StudyReport, SummaryRow,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub n_sequences: usize,
    pub seq_len: usize,
    /// Softmax temperature of the transition rows; lower is more deterministic.
    pub temperature: f64,
    pub mask_rate: f64,
    pub n_buckets: usize,
    /// Logit bonus for staying inside the current token bucket.
    pub bucket_affinity: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_sequences: 2000,
            seq_len: 16,
            temperature: 1.0,
            mask_rate: 0.15,
            n_buckets: 2,
            bucket_affinity: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelRule {
    /// `(argmax over bucket counts) mod n_classes`, ties to the lowest bucket.
    #[default]
    BucketArgmaxMod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamSpec {
    pub n_train: usize,
    pub n_eval: usize,
    pub delta: f64,
    pub n_classes: usize,
    pub label_rule: LabelRule,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for DownstreamSpec {
    fn default() -> Self {
        DownstreamSpec {
            n_train: 32,
            n_eval: 400,
            delta: 0.5,
            n_classes: 2,
            label_rule: LabelRule::BucketArgmaxMod,
            min_len: 8,
            max_len: 16,
        }
    }
}

/// Noise applied by the NoisyTune conditions of every study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSettings {
    pub lambda: f64,
    pub exclude: Vec<String>,
}

impl Default for NoiseSettings {
    fn default() -> Self {
        NoiseSettings {
            lambda: DEFAULT_LAMBDA,
            exclude: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudySettings {
    pub lambda_grid: Vec<f64>,
    /// Extra intensities appended after the grid in the λ sweep.
    pub sweep_extra: Vec<f64>,
    /// Extra NoisyTune intensities reported by the main comparison.
    pub main_extra: Vec<f64>,
    pub fractions: Vec<f64>,
    pub mixout: FinetuneMethod,
    pub recadam: FinetuneMethod,
}

impl Default for StudySettings {
    fn default() -> Self {
        StudySettings {
            lambda_grid: SearchGrid::default().lambda,
            sweep_extra: Vec::new(),
            main_extra: vec![5.0],
            fractions: vec![0.25, 0.5, 0.75, 1.0],
            mixout: FinetuneMethod::mixout_default(),
            recadam: FinetuneMethod::recadam_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSpec {
    /// Fixes the vocabulary buckets, both Markov chains and the pretrained model.
    pub world_seed: u64,
    pub corpus: CorpusSpec,
    pub downstream: DownstreamSpec,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub noise: NoiseSettings,
    pub studies: StudySettings,
    /// One paired replicate per seed.
    pub seeds: Vec<u64>,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            world_seed: 2022,
            corpus: CorpusSpec::default(),
            downstream: DownstreamSpec::default(),
            model: ModelConfig {
                vocab_size: 65,
                d_model: 8,
                n_heads: 2,
                d_ffn: 16,
                max_seq_len: 16,
                n_classes: 2,
                init_profile: InitProfile::default(),
            },
            pretrain: TrainConfig {
                lr: 3e-3,
                epochs: 10,
                batch_size: 32,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                lr: 3e-4,
                epochs: 10,
                batch_size: 8,
                ..TrainConfig::default()
            },
            noise: NoiseSettings::default(),
            studies: StudySettings::default(),
            seeds: (0..20).collect(),
        }
    }
}

fn out_of_range(field: &'static str, requirement: &'static str, value: impl ToString) -> Error {
    Error::Validation(ValidationError::OutOfRange {
        field,
        requirement,
        value: value.to_string(),
    })
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.studies.mixout.validate()?;
        self.studies.recadam.validate()?;
        let c = &self.corpus;
        let d = &self.downstream;
        if self.seeds.is_empty() {
            return Err(out_of_range("seeds", "at least one seed", "[]"));
        }
        if c.n_sequences == 0 {
            return Err(out_of_range("corpus.n_sequences", ">= 1", 0));
        }
        if c.seq_len == 0 || c.seq_len > self.model.max_seq_len {
            return Err(out_of_range(
                "corpus.seq_len",
                "in [1, model.max_seq_len]",
                c.seq_len,
            ));
        }
        if !(c.temperature > 0.0 && c.temperature.is_finite()) {
            return Err(out_of_range("corpus.temperature", "> 0", c.temperature));
        }
        if !(0.0..=1.0).contains(&c.mask_rate) {
            return Err(out_of_range("corpus.mask_rate", "in [0, 1]", c.mask_rate));
        }
        if !c.bucket_affinity.is_finite() {
            return Err(out_of_range(
                "corpus.bucket_affinity",
                "finite",
                c.bucket_affinity,
            ));
        }
        // the last vocabulary id is reserved for the mask token
        if self.model.vocab_size < 2 || c.n_buckets == 0 || c.n_buckets > self.model.vocab_size - 1 {
            return Err(out_of_range(
                "corpus.n_buckets",
                "in [1, model.vocab_size - 1]",
                c.n_buckets,
            ));
        }
        if !(0.0..=1.0).contains(&d.delta) {
            return Err(out_of_range("downstream.delta", "in [0, 1]", d.delta));
        }
        if d.n_classes != self.model.n_classes {
            return Err(out_of_range(
                "downstream.n_classes",
                "equal to model.n_classes",
                d.n_classes,
            ));
        }
        if d.n_classes > c.n_buckets {
            return Err(out_of_range(
                "downstream.n_classes",
                "<= corpus.n_buckets",
                d.n_classes,
            ));
        }
        if d.n_train < self.finetune.batch_size {
            return Err(out_of_range(
                "downstream.n_train",
                ">= finetune.batch_size",
                d.n_train,
            ));
        }
        if d.n_eval == 0 {
            return Err(out_of_range("downstream.n_eval", ">= 1", 0));
        }
        if d.min_len == 0 || d.min_len > d.max_len || d.max_len > self.model.max_seq_len {
            return Err(out_of_range(
                "downstream.min_len",
                "1 <= min_len <= max_len <= model.max_seq_len",
                format!("{}..={}", d.min_len, d.max_len),
            ));
        }
        for &l in self
            .studies
            .lambda_grid
            .iter()
            .chain(&self.studies.sweep_extra)
            .chain(&self.studies.main_extra)
        {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(out_of_range("studies.lambda", "finite and >= 0", l));
            }
        }
        if !(self.noise.lambda >= 0.0 && self.noise.lambda.is_finite()) {
            return Err(out_of_range("noise.lambda", "finite and >= 0", self.noise.lambda));
        }
        for &f in &self.studies.fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(out_of_range("studies.fractions", "in (0, 1]", f));
            }
        }
        for p in &self.noise.exclude {
            crate::perturb::NamePattern::parse(p)?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("scenario serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Run directory name: `run-` plus the first 16 hex digits of the hash.
    pub fn run_dir_name(&self) -> String {
        format!("run-{}", &self.content_hash()[..16])
    }

    /// Id of the mask token: the last vocabulary entry.
    pub fn mask_token(&self) -> u32 {
        (self.model.vocab_size - 1) as u32
    }

    pub fn n_regular_tokens(&self) -> usize {
        self.model.vocab_size - 1
    }
}
