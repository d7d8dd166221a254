//! CLI error type carrying the process exit code: configuration problems
//! exit 2, runtime failures exit 1.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    /// The config file is missing, unreadable, unparsable, or invalid.
    #[error("config error: {0}")]
    Config(String),

    /// An experiment or artifact write failed after a valid config.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<tblab::Error> for CliError {
    fn from(e: tblab::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
