use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LipError>;

#[derive(Debug, Error)]
pub enum LipError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("binary length mismatch: manifest needs {expected} f32 values, weights.bin holds {actual} bytes")]
    BinaryLengthMismatch { expected: usize, actual: usize },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: usize, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
}

impl LipError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LipError::Io { path: path.into(), source }
    }
}
