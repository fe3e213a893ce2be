use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("index ({row}, {col}) out of range for {height}x{width} grid")]
    Index {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },

    #[error("cannot render scene: {0}")]
    Generation(String),

    #[error("pair skipped after {retries} attempts: {reason}")]
    Skipped { retries: usize, reason: String },

    #[error("record rejected: {0}")]
    Rejected(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("non-finite value in {what} at coordinate {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("empty group")]
    EmptyGroup,

    #[error("missing {0}")]
    Missing(&'static str),

    #[error("step {step} outside schedule range 0..={total}")]
    ScheduleRange { step: u64, total: u64 },

    #[error("remote reward: {0}")]
    Remote(String),

    #[error("digest mismatch on resume: {0}")]
    DigestMismatch(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Numerical failures map to a dedicated CLI exit code.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}
