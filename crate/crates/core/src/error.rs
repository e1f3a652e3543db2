use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MarsError>;

#[derive(Debug, Error)]
pub enum MarsError {
    /// Tensor shapes or block wiring do not line up.
    #[error("structural error: {0}")]
    Structural(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid model/training/run configuration. Every violation is listed.
    #[error("configuration error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}:{line}: malformed annotation: {message}")]
    Annotation {
        path: PathBuf,
        line: u32,
        message: String,
    },

    #[error("unknown class names: {}", .0.join(", "))]
    UnknownClasses(Vec<String>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint digest mismatch: expected {expected}, computed {actual}")]
    DigestMismatch { expected: String, actual: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl MarsError {
    pub fn config(msg: impl Into<String>) -> Self {
        MarsError::Config(vec![msg.into()])
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MarsError::Io {
            path: path.into(),
            source,
        }
    }

    /// Validation failures map to exit code 1, everything else to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            MarsError::Config(_) | MarsError::UnknownClasses(_) | MarsError::DigestMismatch { .. }
        )
    }
}

impl From<serde_json::Error> for MarsError {
    fn from(e: serde_json::Error) -> Self {
        MarsError::Serde(e.to_string())
    }
}
