use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("io error: {0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] napmat_core::Error),
}

impl CliError {
    /// 2 for configuration problems, 3 for bad inputs, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(napmat_core::Error::Config(_) | napmat_core::Error::InvalidArgument(_)) => 2,
            CliError::Input(_) => 3,
            CliError::Core(napmat_core::Error::ShapeMismatch(..) | napmat_core::Error::InvalidShape { .. }) => 3,
            _ => 1,
        }
    }
}

/// A core error's message without its category prefix where the category is implied.
pub fn core_message(e: &napmat_core::Error) -> String {
    match e {
        napmat_core::Error::Config(msg) | napmat_core::Error::InvalidArgument(msg) => msg.to_string(),
        other => other.to_string(),
    }
}

/// A core error reported as a configuration problem.
pub fn config_error(e: napmat_core::Error) -> CliError {
    CliError::Config(core_message(&e))
}
