//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on user-supplied values was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Mismatched tensor or table shapes; indicates a caller bug.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A file did not conform to its documented format.
    #[error("format error: {0}")]
    Format(String),

    /// An experiment configuration failed validation.
    #[error("config error: {0}")]
    Config(String),

    /// Training produced non-finite losses for several consecutive batches.
    /// Carries the best model seen before divergence.
    #[error("training diverged: {message}")]
    TrainingDiverged {
        message: String,
        last_state: Box<crate::trainer::TrainedModel>,
    },

    /// An EM posterior row collapsed to all zeros before normalization.
    #[error("degenerate posterior: {0}")]
    DegeneratePosterior(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
