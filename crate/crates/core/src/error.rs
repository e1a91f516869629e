use thiserror::Error;

/// Errors produced anywhere in the retrieval and reasoning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("invalid samples: {0}")]
    InvalidSamples(String),

    #[error("degenerate vector: {0}")]
    Degenerate(String),

    #[error("parse failure: {0}")]
    ParseFailure(String),

    #[error("transport failure: {0}")]
    Transport(String),

    #[error("memory round mismatch: bank is at iteration {expected}, update was for round {got}")]
    RoundMismatch { expected: u32, got: u32 },

    #[error("{path}:{line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("pipeline error: {message}")]
    Pipeline {
        message: String,
        /// Serialized partial state (filter provenance or answer trace) at the time of failure.
        partial: Option<serde_json::Value>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
