use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments or configuration. Exit code 1.
    #[error("{0}")]
    Usage(String),

    /// Failure while running an otherwise valid experiment. Exit code 2.
    #[error("{0}")]
    Runtime(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn is_usage(&self) -> bool {
        matches!(self, CliError::Usage(_))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<orca_core::Error> for CliError {
    fn from(e: orca_core::Error) -> Self {
        if e.is_usage() {
            CliError::Usage(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("I/O error: {e}"))
    }
}
