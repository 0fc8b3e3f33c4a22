use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("degenerate input: norm {norm:e} is not above {threshold:e}")]
    DegenerateNorm { norm: f64, threshold: f64 },

    #[error("row {row} is not unit-norm (norm {norm})")]
    NotUnitNorm { row: usize, norm: f64 },

    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("no valid queries: no instance has a same-class peer")]
    NoValidQueries,

    #[error("class {label} has {available} samples, {required} required")]
    ClassTooSmall {
        label: usize,
        available: usize,
        required: usize,
    },

    #[error("singleton classes: {0:?}")]
    SingletonClasses(Vec<usize>),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by numbers going wrong, as opposed to bad
    /// input or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateNorm { .. }
                | Error::NonFinite { .. }
                | Error::Diverged { .. }
                | Error::GradCheck(_)
        )
    }
}
