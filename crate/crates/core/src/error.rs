use thiserror::Error;

/// Errors raised anywhere in the training lab.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration: unknown ids, invalid keys, inconsistent sizes.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's contract (dimension mismatch, empty input, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation left the finite range.
    #[error("numeric error at token {index}: {message}")]
    Numeric { index: usize, message: String },

    /// Input outside an operation's stated domain, e.g. a ratio outside `[1/R, R]`.
    #[error("precondition violated at index {index}: {message}")]
    Precondition { index: usize, message: String },

    /// Rollouts pushed or requested outside the staleness window.
    #[error("staleness window: {0}")]
    StalenessWindow(String),

    /// The trainer needed rollouts from a generation version the buffer does not hold.
    #[error("rollout buffer starved: no data for generation version {version}")]
    Starvation { version: u64 },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
