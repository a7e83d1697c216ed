use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("stream {ue_id}: timestamps decrease at event {index} ({prev} -> {next})")]
    Ordering {
        ue_id: String,
        index: usize,
        prev: f64,
        next: f64,
    },

    #[error("unknown event type {token:?} for generation {generation}")]
    UnknownEventType { token: String, generation: String },

    #[error("invalid stream {ue_id}: {reason}")]
    InvalidStream { ue_id: String, reason: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("token {index}: {reason}")]
    MalformedToken { index: usize, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("{metric}: {source}")]
    Metric {
        metric: &'static str,
        #[source]
        source: Box<Error>,
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

    pub(crate) fn in_metric(self, metric: &'static str) -> Self {
        Error::Metric {
            metric,
            source: Box::new(self),
        }
    }
}
