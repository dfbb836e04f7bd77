//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CroprError>;

#[derive(Debug, Error)]
pub enum CroprError {
    /// Tensor shapes incompatible with the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Row or element index outside the valid range.
    #[error("index error: {0}")]
    Index(String),

    /// An operation's preconditions were violated.
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid model or run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid pruning schedule.
    #[error("schedule error: {0}")]
    Schedule(String),

    /// Token reinsertion found duplicate or missing positions.
    #[error("fusion error: {0}")]
    Fusion(String),

    /// Requested an operation a module variant does not support.
    #[error("unsupported variant: {0}")]
    UnsupportedVariant(String),

    /// Malformed or inconsistent checkpoint file.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CroprError {
    pub fn dimension(msg: impl Into<String>) -> Self {
        CroprError::Dimension(msg.into())
    }
    pub fn index(msg: impl Into<String>) -> Self {
        CroprError::Index(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        CroprError::Contract(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        CroprError::Config(msg.into())
    }
    pub fn schedule(msg: impl Into<String>) -> Self {
        CroprError::Schedule(msg.into())
    }
    pub fn fusion(msg: impl Into<String>) -> Self {
        CroprError::Fusion(msg.into())
    }
    pub fn checkpoint(msg: impl Into<String>) -> Self {
        CroprError::Checkpoint(msg.into())
    }

    /// Process exit code for the CLI: 2 for configuration problems,
    /// 3 for numeric or validation failures, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            CroprError::Config(_) | CroprError::Schedule(_) | CroprError::UnsupportedVariant(_) => {
                2
            }
            CroprError::Dimension(_)
            | CroprError::Index(_)
            | CroprError::Contract(_)
            | CroprError::Fusion(_)
            | CroprError::Checkpoint(_) => 3,
            CroprError::Io(_) => 1,
        }
    }
}
