use std::fmt;

/// Command failure, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or usage; exit code 2.
    Config(String),
    /// Failure while running; exit code 1.
    Runtime(radar_depth::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<radar_depth::Error> for CliError {
    fn from(e: radar_depth::Error) -> Self {
        match e {
            radar_depth::Error::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other),
        }
    }
}

/// I/O failure on `path` as a runtime error.
pub fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Runtime(radar_depth::Error::io(path, e))
}
