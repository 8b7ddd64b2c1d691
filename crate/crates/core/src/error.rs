use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum WamError {
    /// A caller violated an operation's documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Persisted data failed an integrity check (checksum, magic, truncation).
    #[error("data integrity error: {0}")]
    Integrity(String),

    /// The requested operation is not supported for these inputs.
    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, WamError>;

impl WamError {
    pub fn contract(msg: impl Into<String>) -> Self {
        WamError::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        WamError::Config(msg.into())
    }

    pub fn integrity(msg: impl Into<String>) -> Self {
        WamError::Integrity(msg.into())
    }

    /// Process exit code for the CLI: 2 for config errors, 3 for data
    /// integrity errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            WamError::Config(_) => 2,
            WamError::Integrity(_) => 3,
            _ => 1,
        }
    }
}
