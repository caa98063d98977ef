use std::path::PathBuf;

use thiserror::Error;

/// Every fallible operation in the crate reports through this type.
#[derive(Debug, Error)]
pub enum AirError {
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("non-finite loss at iteration {iteration}, epoch {epoch} (lr {lr}): {detail}")]
    NonFiniteLoss {
        iteration: usize,
        epoch: usize,
        lr: f64,
        detail: String,
    },

    #[error("corrupt artifact {}: {reason}", path.display())]
    Corrupt { path: PathBuf, reason: String },

    #[error("config hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, AirError>;

impl AirError {
    /// Process exit status for command-line front ends: 2 for bad input,
    /// 3 for numeric failure, 4 for damaged or inconsistent artifacts.
    pub fn exit_code(&self) -> i32 {
        match self {
            AirError::NonFiniteLoss { .. } | AirError::Numeric(_) => 3,
            AirError::Corrupt { .. } | AirError::HashMismatch { .. } => 4,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AirError::Io {
            path: path.into(),
            source,
        }
    }
}
