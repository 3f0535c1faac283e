use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("n_c = {n_c} exceeds the number of valid rows ({valid_rows})")]
    TooManyChunks { n_c: usize, valid_rows: usize },

    #[error("target {target} at row {row} is outside the catalog [0, {catalog})")]
    TargetOutOfRange {
        row: usize,
        target: usize,
        catalog: usize,
    },

    #[error("cannot draw {requested} negatives excluding the target from a catalog of {catalog}")]
    TooManyNegatives { requested: usize, catalog: usize },

    #[error("no valid rows in batch")]
    NoValidRows,

    #[error("oracle cap exceeded: {entries} logits > {cap}; use a smaller instance")]
    OracleCapExceeded { entries: usize, cap: usize },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("empty dataset after preprocessing: {0}")]
    EmptyDataset(String),

    #[error("split produced no evaluation users: {0}")]
    NoTestUsers(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
