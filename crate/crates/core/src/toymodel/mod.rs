//! Single-block pre-norm transformer encoder with hand-written backprop.
//!
//! Small enough to finetune hundreds of times on one core, but with the same
//! kinds of parameter matrices as a real encoder (token/position/type
//! embeddings, Q/K/V/O attention, a GELU feed-forward layer, layer norms and
//! two heads), each initialized at a deliberately different scale.

mod block;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ValidationError};
use crate::rng::derive_substream;
use crate::tensorstore::{Checkpoint, NamedTensor};

pub use block::{forward, loss_and_backward, predict, ActivationCache};

/// Init std per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitProfile {
    pub embeddings: f64,
    pub attention: f64,
    pub ffn: f64,
    pub heads: f64,
}

impl Default for InitProfile {
    fn default() -> Self {
        InitProfile {
            embeddings: 0.5,
            attention: 0.08,
            ffn: 0.02,
            heads: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
    pub n_classes: usize,
    #[serde(default)]
    pub init_profile: InitProfile,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 17,
            d_model: 16,
            n_heads: 2,
            d_ffn: 32,
            max_seq_len: 16,
            n_classes: 2,
            init_profile: InitProfile::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ValidationError> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("max_seq_len", self.max_seq_len),
            ("n_classes", self.n_classes),
        ];
        for (field, v) in dims {
            if v == 0 {
                return Err(ValidationError::OutOfRange {
                    field,
                    requirement: ">= 1",
                    value: v.to_string(),
                });
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ValidationError::OutOfRange {
                field: "n_heads",
                requirement: "a divisor of d_model",
                value: self.n_heads.to_string(),
            });
        }
        let p = &self.init_profile;
        for (field, v) in [
            ("init_profile.embeddings", p.embeddings),
            ("init_profile.attention", p.attention),
            ("init_profile.ffn", p.ffn),
            ("init_profile.heads", p.heads),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ValidationError::OutOfRange {
                    field,
                    requirement: "a finite number >= 0",
                    value: v.to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Row-major matrix in f64. Vectors are stored as `1 x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn l1(&self) -> f64 {
        self.data.iter().map(|x| x.abs()).sum()
    }
}

/// Parameter groups used for L1-norm tracking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Embeddings,
    Attention,
    Ffn,
    Layernorm,
    Heads,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Embeddings,
        ParamGroup::Attention,
        ParamGroup::Ffn,
        ParamGroup::Layernorm,
        ParamGroup::Heads,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ParamGroup::Embeddings => "embeddings",
            ParamGroup::Attention => "attention",
            ParamGroup::Ffn => "ffn",
            ParamGroup::Layernorm => "layernorm",
            ParamGroup::Heads => "heads",
        }
    }

    pub fn of(name: &str) -> Option<ParamGroup> {
        match name {
            "embed_tokens" | "embed_pos" | "type_embedding" => Some(ParamGroup::Embeddings),
            "attn_q" | "attn_k" | "attn_v" | "attn_o" => Some(ParamGroup::Attention),
            "ffn1" | "ffn2" => Some(ParamGroup::Ffn),
            "ln1_gain" | "ln1_bias" | "ln2_gain" | "ln2_bias" => Some(ParamGroup::Layernorm),
            "mlm_head" | "cls_head" => Some(ParamGroup::Heads),
            _ => None,
        }
    }
}

/// Tensor names in checkpoint order.
pub const PARAM_NAMES: [&str; 15] = [
    "embed_tokens",
    "embed_pos",
    "type_embedding",
    "attn_q",
    "attn_k",
    "attn_v",
    "attn_o",
    "ffn1",
    "ffn2",
    "ln1_gain",
    "ln1_bias",
    "ln2_gain",
    "ln2_bias",
    "mlm_head",
    "cls_head",
];

fn is_vector(name: &str) -> bool {
    name.starts_with("ln")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embed_tokens: Mat,
    pub embed_pos: Mat,
    pub type_embedding: Mat,
    pub attn_q: Mat,
    pub attn_k: Mat,
    pub attn_v: Mat,
    pub attn_o: Mat,
    pub ffn1: Mat,
    pub ffn2: Mat,
    pub ln1_gain: Mat,
    pub ln1_bias: Mat,
    pub ln2_gain: Mat,
    pub ln2_bias: Mat,
    pub mlm_head: Mat,
    pub cls_head: Mat,
}

/// Gradients share the parameter layout.
pub type Gradients = ModelParams;

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (v, d, f, l, c) = (
            config.vocab_size,
            config.d_model,
            config.d_ffn,
            config.max_seq_len,
            config.n_classes,
        );
        ModelParams {
            config: config.clone(),
            embed_tokens: Mat::zeros(v, d),
            embed_pos: Mat::zeros(l, d),
            type_embedding: Mat::zeros(1, d),
            attn_q: Mat::zeros(d, d),
            attn_k: Mat::zeros(d, d),
            attn_v: Mat::zeros(d, d),
            attn_o: Mat::zeros(d, d),
            ffn1: Mat::zeros(d, f),
            ffn2: Mat::zeros(f, d),
            ln1_gain: Mat::zeros(1, d),
            ln1_bias: Mat::zeros(1, d),
            ln2_gain: Mat::zeros(1, d),
            ln2_bias: Mat::zeros(1, d),
            mlm_head: Mat::zeros(d, v),
            cls_head: Mat::zeros(d, c),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    pub fn tensors(&self) -> [(&'static str, &Mat); 15] {
        [
            ("embed_tokens", &self.embed_tokens),
            ("embed_pos", &self.embed_pos),
            ("type_embedding", &self.type_embedding),
            ("attn_q", &self.attn_q),
            ("attn_k", &self.attn_k),
            ("attn_v", &self.attn_v),
            ("attn_o", &self.attn_o),
            ("ffn1", &self.ffn1),
            ("ffn2", &self.ffn2),
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("mlm_head", &self.mlm_head),
            ("cls_head", &self.cls_head),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Mat); 15] {
        [
            ("embed_tokens", &mut self.embed_tokens),
            ("embed_pos", &mut self.embed_pos),
            ("type_embedding", &mut self.type_embedding),
            ("attn_q", &mut self.attn_q),
            ("attn_k", &mut self.attn_k),
            ("attn_v", &mut self.attn_v),
            ("attn_o", &mut self.attn_o),
            ("ffn1", &mut self.ffn1),
            ("ffn2", &mut self.ffn2),
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
            ("mlm_head", &mut self.mlm_head),
            ("cls_head", &mut self.cls_head),
        ]
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, m)| m)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.tensors_mut()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, m)| m)
    }

    pub fn numel(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.data.len()).sum()
    }

    /// Visits `(name, self_tensor, other_tensor)` for two congruent parameter sets.
    pub fn zip_mut<'a>(
        &'a mut self,
        other: &'a ModelParams,
        mut f: impl FnMut(&'static str, &mut Mat, &Mat),
    ) {
        for ((name, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            f(name, a, b);
        }
    }

    pub fn is_congruent(&self, other: &ModelParams) -> bool {
        self.tensors()
            .iter()
            .zip(other.tensors().iter())
            .all(|((_, a), (_, b))| a.rows == b.rows && a.cols == b.cols)
    }
}

/// Random initialization: every group drawn from `Normal(0, std^2)` with the
/// std taken from the config's init profile; `type_embedding` is exactly zero,
/// layer-norm gains one and biases zero. Values are rounded through f32 so a
/// fresh model survives a checkpoint round trip unchanged.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    use rand_distr::{Distribution, StandardNormal};

    config.validate()?;
    let profile = config.init_profile;
    let mut params = ModelParams::zeros(config);
    for (name, m) in params.tensors_mut() {
        let std = match ParamGroup::of(name) {
            Some(ParamGroup::Embeddings) if name != "type_embedding" => profile.embeddings,
            Some(ParamGroup::Attention) => profile.attention,
            Some(ParamGroup::Ffn) => profile.ffn,
            Some(ParamGroup::Heads) => profile.heads,
            _ => {
                if name.ends_with("_gain") {
                    m.data.fill(1.0);
                }
                continue;
            }
        };
        let mut rng = derive_substream(seed, name);
        for x in m.data.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x = (z * std) as f32 as f64;
        }
    }
    Ok(params)
}

fn expected_shape(name: &str, m: &Mat) -> Vec<usize> {
    if is_vector(name) {
        vec![m.cols]
    } else {
        vec![m.rows, m.cols]
    }
}

pub fn params_to_checkpoint(params: &ModelParams) -> Checkpoint {
    let tensors = params
        .tensors()
        .into_iter()
        .map(|(name, m)| NamedTensor {
            name: name.to_owned(),
            shape: expected_shape(name, m),
            data: m.data.iter().map(|&x| x as f32).collect(),
        })
        .collect();
    let mut ckpt = Checkpoint {
        tensors,
        metadata: Default::default(),
    };
    if let Ok(cfg) = serde_json::to_string(&params.config) {
        ckpt.metadata.insert("model_config".into(), cfg);
    }
    ckpt
}

/// Reads the model config stored in a checkpoint's metadata, if any.
pub fn config_from_checkpoint(ckpt: &Checkpoint) -> Option<ModelConfig> {
    ckpt.metadata
        .get("model_config")
        .and_then(|s| serde_json::from_str(s).ok())
}

pub fn checkpoint_to_params(ckpt: &Checkpoint, config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    ckpt.validate()?;
    let mut params = ModelParams::zeros(config);
    for (name, m) in params.tensors_mut() {
        let t = ckpt
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_owned()))?;
        let expected = expected_shape(name, m);
        if t.shape != expected {
            return Err(Error::Shape {
                name: name.to_owned(),
                expected,
                actual: t.shape.clone(),
            });
        }
        for (dst, &src) in m.data.iter_mut().zip(&t.data) {
            *dst = src as f64;
        }
    }
    if let Some(extra) = ckpt.names().find(|n| !PARAM_NAMES.contains(n)) {
        return Err(Error::Config(format!(
            "checkpoint has tensor \"{extra}\" that the model does not use"
        )));
    }
    Ok(params)
}

/// Which output head a forward pass feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Mlm,
    Cls,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    None,
    /// One class id per sequence.
    Class(Vec<usize>),
    /// Optional target token per position, `batch * seq` entries.
    Mlm(Vec<Option<u32>>),
}

/// A batch of equal-length sequences. `mask[b*seq + i] == 0` marks padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub seq: usize,
    pub tokens: Vec<u32>,
    pub mask: Vec<u8>,
    pub labels: Labels,
}

impl Batch {
    /// Batch of whole sequences, right-padded with token 0 (mask 0) to the
    /// longest one.
    pub fn from_sequences(seqs: &[&[u32]], labels: Labels) -> Self {
        let seq = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(seqs.len() * seq);
        let mut mask = Vec::with_capacity(seqs.len() * seq);
        for s in seqs {
            tokens.extend_from_slice(s);
            tokens.resize(tokens.len() + seq - s.len(), 0);
            mask.resize(mask.len() + s.len(), 1);
            mask.resize(mask.len() + seq - s.len(), 0);
        }
        Batch {
            batch: seqs.len(),
            seq,
            tokens,
            mask,
            labels,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let n = self.batch * self.seq;
        if self.batch == 0 || self.seq == 0 {
            return Err(Error::Domain("empty batch".into()));
        }
        if self.tokens.len() != n || self.mask.len() != n {
            return Err(Error::Config(format!(
                "batch of {}x{} needs {n} tokens and mask entries, got {} and {}",
                self.batch,
                self.seq,
                self.tokens.len(),
                self.mask.len()
            )));
        }
        if self.seq > config.max_seq_len {
            return Err(Error::Config(format!(
                "sequence length {} exceeds max_seq_len {}",
                self.seq, config.max_seq_len
            )));
        }
        if let Some(t) = self.tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
            return Err(Error::Config(format!(
                "token id {t} out of range for vocab_size {}",
                config.vocab_size
            )));
        }
        for b in 0..self.batch {
            if self.mask[b * self.seq..(b + 1) * self.seq]
                .iter()
                .all(|&m| m == 0)
            {
                return Err(Error::Config(format!("sequence {b} is fully masked")));
            }
        }
        match &self.labels {
            Labels::None => {}
            Labels::Class(ys) => {
                if ys.len() != self.batch {
                    return Err(Error::Config(format!(
                        "{} class labels for a batch of {}",
                        ys.len(),
                        self.batch
                    )));
                }
                if let Some(y) = ys.iter().find(|&&y| y >= config.n_classes) {
                    return Err(Error::Config(format!(
                        "class label {y} out of range for n_classes {}",
                        config.n_classes
                    )));
                }
            }
            Labels::Mlm(ts) => {
                if ts.len() != n {
                    return Err(Error::Config(format!(
                        "{} MLM targets for {n} positions",
                        ts.len()
                    )));
                }
                if let Some(t) = ts.iter().flatten().find(|&&t| t as usize >= config.vocab_size) {
                    return Err(Error::Config(format!("MLM target {t} out of vocabulary")));
                }
            }
        }
        Ok(())
    }
}
