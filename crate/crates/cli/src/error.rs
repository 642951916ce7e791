use thiserror::Error;

/// CLI failures, each with its process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot use checkpoint: {0}")]
    Checkpoint(String),

    #[error("training aborted: {0}")]
    Aborted(String),

    #[error("invalid arguments: {0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] lvgan_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Checkpoint(_) => 3,
            CliError::Aborted(_) => 4,
            CliError::Core(_) | CliError::Io(_) => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
