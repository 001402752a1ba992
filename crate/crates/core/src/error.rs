use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed input {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("no adverse events survive filtering (min count {min_count}, {candidates} candidates)")]
    EmptyVocabulary { min_count: u64, candidates: usize },

    #[error("invalid epsilon {0}: must be positive or infinite")]
    InvalidEpsilon(f64),

    #[error("matrix factorization failed ({context}); estimated condition number {condition:.3e}")]
    Factorization { context: String, condition: f64 },

    #[error("non-finite state at iteration {iteration}: {detail}")]
    NonFinite { iteration: usize, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("every epsilon in the grid failed: {0}")]
    AllGridPointsFailed(String),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
