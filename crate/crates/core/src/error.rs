use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid out of bounds: {0}")]
    GridOutOfBounds(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid sample ranges: {0}")]
    InvalidRanges(String),

    #[error("source too small: {0}")]
    SourceTooSmall(String),

    /// A configuration problem; `key` names the offending config field.
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("batch norm group {group} does not divide batch size {batch}")]
    BnGroup { group: usize, batch: usize },

    #[error("plan mismatch: {0}")]
    PlanMismatch(String),

    #[error("non-finite loss {loss} at iteration {iter} ({record})")]
    NonFiniteLoss {
        iter: usize,
        loss: f64,
        record: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
