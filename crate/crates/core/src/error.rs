use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the defense engine and its tooling.
#[derive(Debug, Error)]
pub enum BirdError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch for {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("corpus build failed: {0}")]
    Build(String),

    #[error("duplicate document ids: {}", .0.join(", "))]
    DuplicateIds(Vec<String>),

    #[error("document not found: {0}")]
    NotFound(String),

    #[error("pairwise cache needs {required} bytes but the budget is {budget} bytes")]
    BudgetExceeded { required: u128, budget: u128 },

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty scenario: {0}")]
    EmptyScenario(String),

    #[error("i/o error on {path}: {source}", path = .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = BirdError> = std::result::Result<T, E>;

impl BirdError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        BirdError::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BirdError::Io {
            path: path.into(),
            source,
        }
    }
}
