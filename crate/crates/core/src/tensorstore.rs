//! Named-tensor checkpoints and the `NTK1` container format.
//!
//! Layout on disk:
//!
//! ```text
//! "NTK1" | header length (u64 LE) | UTF-8 JSON header | payload
//! ```
//!
//! The header lists tensors in insertion order with byte offsets relative to
//! the payload start; the payload is the concatenation of every tensor's
//! row-major f32 little-endian data. Offsets are contiguous and ascending.
//!
//! For hand-written test fixtures [`load_checkpoint`] also accepts an all-JSON
//! document (detected by a leading `{`) whose tensors carry their values inline.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ValidationError};

pub const MAGIC: &[u8; 4] = b"NTK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let t = NamedTensor {
            name: name.into(),
            shape,
            data,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn scalar(name: impl Into<String>, value: f32) -> Result<Self> {
        Self::new(name, vec![1], vec![value])
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.name.is_empty() {
            return Err(ValidationError::EmptyName);
        }
        if self.shape.is_empty() {
            return Err(ValidationError::EmptyShape(self.name.clone()));
        }
        if self.shape.contains(&0) {
            return Err(ValidationError::ZeroDim {
                name: self.name.clone(),
                shape: self.shape.clone(),
            });
        }
        let expected = self.numel();
        if expected != self.data.len() {
            return Err(ValidationError::LengthMismatch {
                name: self.name.clone(),
                expected,
                actual: self.data.len(),
            });
        }
        Ok(())
    }
}

/// Ordered collection of named tensors plus free-form string metadata.
///
/// Fields are public so callers can assemble checkpoints freely; everything
/// that persists or consumes a checkpoint calls [`Checkpoint::validate`] first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tensors(tensors: Vec<NamedTensor>) -> Result<Self> {
        let ckpt = Checkpoint {
            tensors,
            metadata: BTreeMap::new(),
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Appends a tensor, rejecting invalid tensors and duplicate names.
    pub fn push(&mut self, tensor: NamedTensor) -> Result<()> {
        tensor.validate()?;
        if self.get(&tensor.name).is_some() {
            return Err(ValidationError::DuplicateName(tensor.name).into());
        }
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|t| t.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        let mut seen = HashSet::with_capacity(self.tensors.len());
        for t in &self.tensors {
            t.validate()?;
            if !seen.insert(t.name.as_str()) {
                return Err(ValidationError::DuplicateName(t.name.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    tensors: Vec<HeaderEntry>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Deserialize)]
struct JsonFixture {
    #[serde(default = "default_version")]
    version: u32,
    tensors: Vec<NamedTensor>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

fn default_version() -> u32 {
    FORMAT_VERSION
}

/// Serializes a checkpoint to its container bytes. Identical checkpoints
/// always produce identical bytes.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    ckpt.validate()?;
    let mut offset = 0u64;
    let entries = ckpt
        .tensors
        .iter()
        .map(|t| {
            let nbytes = 4 * t.data.len() as u64;
            let e = HeaderEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset,
                nbytes,
            };
            offset += nbytes;
            e
        })
        .collect();
    let header = Header {
        version: FORMAT_VERSION,
        tensors: entries,
        metadata: ckpt.metadata.clone(),
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| Error::Format(format!("header encoding: {e}")))?;

    let mut out = Vec::with_capacity(12 + header_bytes.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for t in &ckpt.tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.first() == Some(&b'{') {
        return decode_json_fixture(bytes);
    }
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic bytes (expected \"NTK1\")".into()));
    }
    if bytes.len() < 12 {
        return Err(Error::Corrupt {
            what: "header length field".into(),
            expected: 12,
            actual: bytes.len() as u64,
        });
    }
    let header_len = u64::from_le_bytes(bytes[4..12].try_into().expect("8-byte slice"));
    let available = (bytes.len() - 12) as u64;
    if header_len > available {
        return Err(Error::Corrupt {
            what: "JSON header".into(),
            expected: header_len,
            actual: available,
        });
    }
    let header_end = 12 + header_len as usize;
    let header: Header =
        serde_json::from_slice(&bytes[12..header_end]).map_err(|e| Error::Format(format!("header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {} (expected {FORMAT_VERSION})",
            header.version
        )));
    }

    let payload = &bytes[header_end..];
    let mut expected_offset = 0u64;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        if entry.offset != expected_offset {
            return Err(Error::Format(format!(
                "tensor \"{}\" at offset {} but previous data ends at {expected_offset}",
                entry.name, entry.offset
            )));
        }
        let numel: usize = entry.shape.iter().product();
        if entry.nbytes != 4 * numel as u64 {
            return Err(Error::Format(format!(
                "tensor \"{}\": nbytes {} does not match shape {:?}",
                entry.name, entry.nbytes, entry.shape
            )));
        }
        let end = entry.offset + entry.nbytes;
        if end > payload.len() as u64 {
            return Err(Error::Corrupt {
                what: format!("payload of tensor \"{}\"", entry.name),
                expected: end,
                actual: payload.len() as u64,
            });
        }
        let raw = &payload[entry.offset as usize..end as usize];
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        tensors.push(NamedTensor {
            name: entry.name,
            shape: entry.shape,
            data,
        });
        expected_offset = end;
    }
    if expected_offset != payload.len() as u64 {
        return Err(Error::Corrupt {
            what: "payload length".into(),
            expected: expected_offset,
            actual: payload.len() as u64,
        });
    }

    let ckpt = Checkpoint {
        tensors,
        metadata: header.metadata,
    };
    ckpt.validate()?;
    Ok(ckpt)
}

fn decode_json_fixture(bytes: &[u8]) -> Result<Checkpoint> {
    let fixture: JsonFixture =
        serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("JSON fixture: {e}")))?;
    if fixture.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {} (expected {FORMAT_VERSION})",
            fixture.version
        )));
    }
    let ckpt = Checkpoint {
        tensors: fixture.tensors,
        metadata: fixture.metadata,
    };
    ckpt.validate()?;
    Ok(ckpt)
}

/// Writes `ckpt` to `path`. Invariants are checked before the file is touched.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(ckpt)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorDiff {
    pub name: String,
    pub max_abs: f64,
    pub mean_abs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DiffReport {
    pub tensors: Vec<TensorDiff>,
    pub only_in_a: Vec<String>,
    pub only_in_b: Vec<String>,
    /// Present on both sides with different shapes; no element diff is computed.
    pub shape_mismatch: Vec<String>,
}

impl DiffReport {
    pub fn get(&self, name: &str) -> Option<&TensorDiff> {
        self.tensors.iter().find(|d| d.name == name)
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().map(|d| d.max_abs).fold(0.0, f64::max)
    }

    pub fn is_identical(&self) -> bool {
        self.only_in_a.is_empty()
            && self.only_in_b.is_empty()
            && self.shape_mismatch.is_empty()
            && self.tensors.iter().all(|d| d.max_abs == 0.0)
    }
}

/// Absolute difference that is zero only for identical bit patterns:
/// signed zeros count as the smallest positive difference, NaNs as infinite.
fn element_diff(a: f32, b: f32) -> f64 {
    if a.to_bits() == b.to_bits() {
        return 0.0;
    }
    let d = (a as f64 - b as f64).abs();
    if d.is_nan() {
        f64::INFINITY
    } else if d == 0.0 {
        f64::MIN_POSITIVE
    } else {
        d
    }
}

pub fn checkpoint_diff(a: &Checkpoint, b: &Checkpoint) -> DiffReport {
    let mut report = DiffReport::default();
    for ta in &a.tensors {
        let Some(tb) = b.get(&ta.name) else {
            report.only_in_a.push(ta.name.clone());
            continue;
        };
        if ta.shape != tb.shape || ta.data.len() != tb.data.len() {
            report.shape_mismatch.push(ta.name.clone());
            continue;
        }
        let (mut max_abs, mut sum) = (0.0f64, 0.0f64);
        for (&x, &y) in ta.data.iter().zip(&tb.data) {
            let d = element_diff(x, y);
            max_abs = max_abs.max(d);
            sum += d;
        }
        let mean_abs = if ta.data.is_empty() {
            0.0
        } else {
            sum / ta.data.len() as f64
        };
        report.tensors.push(TensorDiff {
            name: ta.name.clone(),
            max_abs,
            mean_abs,
        });
    }
    report.only_in_b = b
        .names()
        .filter(|n| a.get(n).is_none())
        .map(str::to_owned)
        .collect();
    report
}
