pub mod error;
pub mod exec;
pub mod expbench;
pub mod perturb;
pub mod rng;
pub mod tensorstore;
pub mod toymodel;
pub mod trainkit;

pub use error::{Error, ErrorKind, Result, ValidationError};
pub use exec::Execution;
