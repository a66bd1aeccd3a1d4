use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{op}: index {index} at position {position} is out of range (bound {bound})")]
    Index {
        op: &'static str,
        position: usize,
        index: usize,
        bound: usize,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("class {class} has only {size} nodes; stratified splitting needs at least 3")]
    Stratification { class: usize, size: usize },

    #[error("edge partition: {0}")]
    Partition(String),

    #[error("sampling: {0}")]
    Sampling(String),

    #[error("{file}:{line}: {msg}")]
    Ingestion {
        file: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("synthetic generation: {0}")]
    Generation(String),

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the numbers going bad rather than by input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}
