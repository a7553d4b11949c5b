use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library. The CLI maps every variant to exit code 1.
#[derive(Debug, Error)]
pub enum ScaError {
    #[error("invalid UTF-8 at byte offset {offset}")]
    Encoding { offset: usize },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("category `{0}` has no documents")]
    EmptyCategory(String),

    #[error("unknown category `{0}`")]
    UnknownCategory(String),

    #[error("invalid split ratios {0:?}: must be non-negative and sum to 1")]
    InvalidRatios([f64; 3]),

    #[error("batch size {batch} exceeds available count {available}")]
    BatchTooLarge { batch: usize, available: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("zero-norm vector{}", .row.map(|r| format!(" at row {r}")).unwrap_or_default())]
    ZeroVector { row: Option<usize> },

    #[error("token id {0} is out of vocabulary")]
    OutOfVocabulary(usize),

    #[error("non-finite {what} at epoch {epoch}, batch {batch}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        batch: usize,
    },

    #[error(
        "power iteration did not converge for component {component} after {iterations} iterations"
    )]
    NoConvergence { component: usize, iterations: usize },

    #[error("rare-word set is empty")]
    EmptyRareSet,

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("malformed manifest line {line} in {path}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

pub type Result<T> = std::result::Result<T, ScaError>;

impl ScaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ScaError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        ScaError::Precondition(msg.into())
    }
}
