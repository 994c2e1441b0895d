use sts_core::Error as CoreError;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Config file unreadable, malformed, or failing validation.
    #[error("config: {0}")]
    Config(String),

    /// Inputs inconsistent with each other (e.g. checkpoint width vs task).
    #[error("usage: {0}")]
    Usage(String),

    #[error("diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => EXIT_USAGE,
            CliError::Diverged(_) => EXIT_DIVERGED,
            CliError::Core(e) if e.is_divergence() => EXIT_DIVERGED,
            CliError::Core(CoreError::Argument(_) | CoreError::Format(_) | CoreError::Parse { .. } | CoreError::Data(_)) => {
                EXIT_USAGE
            }
            CliError::Core(_) => EXIT_FAILURE,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
