use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoxError>;

#[derive(Debug, Error)]
pub enum CoxError {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("line {line}: {message}")]
    Validation { line: u64, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("no events to anchor partial likelihood")]
    NoEvents,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("monotone likelihood / singular information: {0}")]
    Singular(String),

    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CoxError {
    /// True for errors caused by bad input rather than by a failed computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            CoxError::Parse { .. }
                | CoxError::Validation { .. }
                | CoxError::InvalidArgument(_)
                | CoxError::Dimension { .. }
                | CoxError::NoEvents
                | CoxError::Csv(_)
                | CoxError::Json(_)
        )
    }
}
