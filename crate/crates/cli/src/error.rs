use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("gradient check failed: max relative error {0:.3e}")]
    GradCheck(f64),
    #[error(transparent)]
    Core(#[from] avflow_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// 2 for usage and configuration problems, 3 for numerical failure,
    /// 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use avflow_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Core(E::Contract(_)) => 2,
            CliError::Core(E::Numerical(_)) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn usage<S: Into<String>>(msg: S) -> CliError {
    CliError::Usage(msg.into())
}
