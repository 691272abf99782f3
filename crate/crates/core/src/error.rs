//! Error type shared by every stage of the pipeline.

use std::path::PathBuf;

/// Errors produced while loading data, training, or evaluating embeddings.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("invalid segment `{segment_id}`: {reason}")]
    InvalidSegment { segment_id: String, reason: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite value in `{0}`")]
    Numeric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
