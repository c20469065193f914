//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid run configuration or taxonomy mismatch.
    #[error("config error: {0}")]
    Config(String),

    /// Task file, rule file, or corpus failed to load.
    #[error("load error: {0}")]
    Load(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// Backbone transport or protocol failure. `retryable` distinguishes
    /// transient transport errors from protocol-level ones.
    #[error("backbone error (retryable={retryable}): {message}")]
    Backbone { retryable: bool, message: String },

    /// Trajectory log failed schema or digest-chain validation.
    #[error("corruption at {location}: {message}")]
    Corruption { location: String, message: String },

    /// Operation requested on inputs that cannot support it
    /// (e.g. probability probe on a backbone without logprobs).
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Degenerate metric input (e.g. single-class labels for ROC).
    #[error("metric error: {0}")]
    Metric(String),
}

impl Error {
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Backbone { retryable: true, .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
