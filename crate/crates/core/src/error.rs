use thiserror::Error;

/// Errors raised anywhere in the offsite-tuning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {index} out of range for {what} (bound {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("invalid emulator spec: {0}")]
    Spec(String),
    #[error("integration rejected: {0}")]
    Integration(String),
    #[error("provenance mismatch on {}", fields.join(", "))]
    Provenance { fields: Vec<String> },
    #[error("packaging refused: {0}")]
    Packaging(String),
    #[error("checksum mismatch for tensor `{0}`")]
    Checksum(String),
    #[error("malformed bundle: {0}")]
    Format(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
