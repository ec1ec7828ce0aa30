use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid time {0}: must be finite and non-negative")]
    InvalidTime(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("path {path} became non-finite at step {step}")]
    PathAborted { path: usize, step: usize },

    #[error("{aborted} of {total} paths aborted (limit 0.1%)")]
    AbortRate { aborted: usize, total: usize },

    #[error("generation {generation}: {source}")]
    Generation {
        generation: usize,
        #[source]
        source: Box<LabError>,
    },

    #[error("linear solve failed: {0}")]
    Linalg(String),

    #[error("ledger schema mismatch: {0}")]
    Schema(String),

    #[error("sample store {path}: {reason}")]
    Store { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl LabError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        LabError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn at_generation(self, generation: usize) -> Self {
        match self {
            e @ LabError::Generation { .. } => e,
            e => LabError::Generation {
                generation,
                source: Box::new(e),
            },
        }
    }
}
