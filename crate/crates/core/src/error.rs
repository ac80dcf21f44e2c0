use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{0}")]
    InvalidInput(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("wav format: {0}")]
    WavFormat(String),

    #[error("mel file: {0}")]
    MelFormat(String),

    #[error("vocabulary: {0}")]
    Vocabulary(String),

    #[error("archive: {0}")]
    Archive(String),

    #[error("stage plan: {0}")]
    Plan(String),

    #[error("training: {0}")]
    Training(String),

    #[error("flow {flow}: mixing matrix is singular (|det| = {det:e})")]
    SingularMixing { flow: usize, det: f64 },

    #[error("corpus: {0}")]
    Corpus(String),

    #[error("tts client: {0}")]
    Client(String),

    #[error("ratings: {0}")]
    Ratings(String),

    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn path(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Path {
            path: path.into(),
            source,
        }
    }
}
