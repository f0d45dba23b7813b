//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid volume file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("dimension mismatch: {0}")]
    DimsMismatch(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("singular dependency matrix")]
    Singular,
    #[error("singular dependency matrix at voxel ({x}, {y}, {z})")]
    SingularAt { x: usize, y: usize, z: usize },
    #[error("calibration samples must contain both correct and incorrect examples")]
    SingleClass,
    #[error("empty sample: {0}")]
    EmptySample(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Singular | Error::SingularAt { .. } => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
