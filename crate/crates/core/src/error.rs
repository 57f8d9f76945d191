use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed numeric input (non-finite values, empty vectors, bad ranges).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An argument outside its admissible range (k out of bounds, shape mismatch).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The requested combination of components makes no sense, e.g. a
    /// sparsity loss on a router that has no sparsity factor.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("config digest mismatch: checkpoint {checkpoint}, config {config}")]
    DigestMismatch { checkpoint: String, config: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
