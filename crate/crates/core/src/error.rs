use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller violated a documented precondition.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed dataset container or checkpoint.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    /// True for errors caused by bad input rather than by the computation.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Usage(_) | Error::Parse { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
