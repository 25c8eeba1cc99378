use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate qid {0}")]
    DuplicateQid(String),

    #[error("entity {0} has no description")]
    NoDescription(String),

    #[error("unknown entity {0}")]
    UnknownEntity(String),

    #[error("cannot encode entities: {}", .0.join(", "))]
    Unencodable(Vec<String>),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("non-finite score at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("vocabulary target size {target} is below the minimum {minimum}")]
    VocabTooSmall { target: usize, minimum: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("mismatched query sets")]
    QuerySetMismatch,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
