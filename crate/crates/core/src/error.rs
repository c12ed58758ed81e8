use thiserror::Error;

/// Everything that can go wrong inside the framework.
///
/// The variants are coarse on purpose: callers branch on *class* of failure
/// (bad config vs. bad data vs. broken internal contract), while the payload
/// string carries the specifics for diagnostics.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/layer shapes don't line up.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// An API contract was violated (non-scalar loss, repeated backward,
    /// batch of one in train-mode batchnorm, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A data file is malformed (wrong magic, truncated record, ...).
    #[error("format error: {0}")]
    Format(String),

    /// Out-of-range index (e.g. a class label outside [0, K)).
    #[error("index error: {0}")]
    Index(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
