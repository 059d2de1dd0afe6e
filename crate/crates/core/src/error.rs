use thiserror::Error;

/// Crate-wide error type.
///
/// `InvalidConfig`-style variants map to CLI exit code 1, numerical
/// failures (`NonFinite`) to exit code 2.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("infeasible request: {0}")]
    Infeasible(String),

    #[error("non-finite value at tape node {node} ({context})")]
    NonFinite { node: usize, context: String },

    #[error("missing data moment for multi-index {0:?}")]
    MissingMoment(Vec<u32>),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    /// Exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CoreError::NonFinite { .. } => 2,
            _ => 1,
        }
    }
}
