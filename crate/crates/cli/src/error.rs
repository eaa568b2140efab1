use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, flags or missing inputs. Exit code 2.
    #[error("config error: {0}")]
    Config(String),

    /// A check ran to completion and reported failures. Exit code 1.
    #[error("check failed: {0}")]
    CheckFailed(String),

    /// Failure while running. Exit code 3.
    #[error(transparent)]
    Run(alignkd::Error),
}

impl From<alignkd::Error> for CliError {
    fn from(e: alignkd::Error) -> Self {
        match e {
            alignkd::Error::Config(msg) => CliError::Config(msg),
            other => CliError::Run(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::CheckFailed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Run(_) => 3,
        }
    }
}
