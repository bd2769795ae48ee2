use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid architecture: {field} {reason}")]
    InvalidArch { field: &'static str, reason: String },

    #[error("invalid fine-tuning method: {0}")]
    InvalidMethod(String),

    #[error("invalid value for {field}: {reason}")]
    Validation { field: &'static str, reason: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unknown architecture `{0}`")]
    UnknownArch(String),

    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("no valid records in {0}")]
    EmptyRunSet(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("fit failed: every start diverged (tried {tried} initial points, e.g. {example})")]
    FitFailure { tried: usize, example: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported mode: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Validation {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn arch(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArch {
            field,
            reason: reason.into(),
        }
    }
}
