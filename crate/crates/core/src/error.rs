use std::path::PathBuf;

use thiserror::Error;

/// Broken invariant on a tensor, checkpoint or spec. Raised before anything
/// is persisted or computed.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("tensor name is empty")]
    EmptyName,
    #[error("tensor \"{0}\" has an empty shape (scalars use shape [1])")]
    EmptyShape(String),
    #[error("tensor \"{name}\" has a zero-sized dimension in shape {shape:?}")]
    ZeroDim { name: String, shape: Vec<usize> },
    #[error("tensor \"{name}\": shape implies {expected} elements, data has {actual}")]
    LengthMismatch {
        name: String,
        expected: usize,
        actual: usize,
    },
    #[error("duplicate tensor name \"{0}\"")]
    DuplicateName(String),
    #[error("invalid exclusion pattern {0:?}: patterns are non-empty and may only use '*' as a wildcard")]
    InvalidPattern(String),
    #[error("{field} must be {requirement}, got {value}")]
    OutOfRange {
        field: &'static str,
        requirement: &'static str,
        value: String,
    },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt checkpoint ({what}): expected {expected} bytes, found {actual}")]
    Corrupt {
        what: String,
        expected: u64,
        actual: u64,
    },
    #[error("missing tensor \"{0}\"")]
    MissingTensor(String),
    #[error("shape mismatch for tensor \"{name}\": expected {expected:?}, found {actual:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("non-finite value in tensor \"{0}\"")]
    NonFinite(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
}

/// Coarse failure class, used by the command-line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Io,
    Numeric,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. } | Error::Format(_) | Error::Corrupt { .. } => ErrorKind::Io,
            Error::Validation(_) | Error::MissingTensor(_) | Error::Shape { .. } | Error::Config(_) => {
                ErrorKind::Config
            }
            Error::NonFinite(_) | Error::Domain(_) => ErrorKind::Numeric,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
