use specrg::SpecRgError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or arguments: exit code 2.
    #[error("config error: {0}")]
    Config(String),
    /// The engine refused to run or failed part-way: exit code 1.
    #[error("engine error: {0}")]
    Engine(SpecRgError),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<SpecRgError> for CliError {
    fn from(e: SpecRgError) -> Self {
        match e {
            SpecRgError::InvalidParameters(m) | SpecRgError::InvalidGrid(m) => CliError::Config(m),
            other => CliError::Engine(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Engine(_) | CliError::Io(_) => 1,
        }
    }
}
