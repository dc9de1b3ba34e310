use thiserror::Error;

/// Errors shared by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric overflow in field `{field}` (datum {datum})")]
    NumericOverflow { field: &'static str, datum: usize },

    #[error("state error: {0}")]
    State(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("divergence at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error("capability error: {0}")]
    Capability(String),

    #[error("kernel conditioning error: {0}")]
    Conditioning(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
