use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("{0}: input is empty")]
    Empty(&'static str),

    #[error("cannot draw {requested} distinct items from a pool of {available}")]
    Capacity { requested: usize, available: usize },

    #[error("vocabulary is empty")]
    EmptyVocabulary,

    #[error("text has no in-vocabulary tokens")]
    EmptyText,

    #[error("{mode} fusion requires the {missing} modality")]
    ModalityRequired {
        mode: &'static str,
        missing: &'static str,
    },

    #[error("post has neither text nor image")]
    EmptyPost,

    #[error("class index {index} out of range for {count} classes")]
    Class { index: usize, count: usize },

    #[error("auxiliary batch has no negative pairs")]
    EmptyBatch,

    #[error("inconsistent state: {0}")]
    State(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("parse error in {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid record {id}: {message}")]
    Validation { id: String, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset too small: {0} posts, need at least 10")]
    TooSmall(usize),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("bad file format in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::Shape {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the arithmetic itself (non-finite values, failed
    /// gradient checks) as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_))
    }
}
