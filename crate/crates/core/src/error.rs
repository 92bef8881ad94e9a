use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index error in {op}: {index} out of range for {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that originate from user-supplied configuration.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

/// Failures when reading a checkpoint file. Each corruption mode is distinct.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("shape mismatch for parameter `{name}`: file has {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("truncated payload: need {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
}
