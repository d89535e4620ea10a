use crate::grad::GradError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("zero-probability state {index} in {which}; full support required")]
    SupportViolation { which: &'static str, index: usize },
    #[error("{what} {value} out of range (limit {limit})")]
    OutOfRange {
        what: &'static str,
        value: usize,
        limit: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("numeric overflow in {0}")]
    Overflow(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Whether this error reflects a numeric blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Grad(GradError::NonFinite { .. })
                | Error::NonFinite(_)
                | Error::Overflow(_)
                | Error::Diverged(_)
        )
    }
}
