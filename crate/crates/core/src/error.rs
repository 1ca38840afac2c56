use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("usage error: {0}")]
    Usage(String),

    #[error("empty vocabulary")]
    EmptyVocabulary,

    #[error("undefined similarity: zero vector")]
    UndefinedSimilarity,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}: line {line}: {msg}")]
    Format {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("row {row}: duplicate index")]
    DuplicateIndex { row: usize },

    #[error("no prediction target at t={t} (sequence length {len})")]
    NoPredictionTarget { t: usize, len: usize },

    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),

    #[error("infeasible synthetic config: {0}")]
    Infeasible(String),

    #[error("token id {id} out of range (embedding rows {rows})")]
    TokenOutOfRange { id: usize, rows: usize },

    #[error("plan validation: {0}")]
    Plan(String),

    #[error("retriable fetch failure: {0}")]
    Retriable(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn format(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Validation failures (bad input, bad config) as opposed to runtime failures.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::Retriable(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
