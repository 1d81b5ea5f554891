use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("invalid trajectory `{id}`: {}", .violations.join("; "))]
    InvalidTrajectory { id: String, violations: Vec<String> },

    #[error("empty step")]
    EmptyStep,

    #[error("positive log-probability {0} (log-probabilities must be <= 0)")]
    PositiveLogProb(f64),

    #[error("degenerate labels: both classes are required")]
    DegenerateLabels,

    #[error("AUROC undefined: labels contain a single class")]
    AurocUndefined,

    #[error("missing label for `{0}`")]
    MissingLabel(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("model file: {0}")]
    Model(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
