use thiserror::Error;

/// Errors raised by the solvers and the experiment runner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("config error at line {line}, column {column}: {message}")]
    Config {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("identification failure in stage `{stage}`: {message}")]
    Identification { stage: String, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn solver(msg: impl Into<String>) -> Self {
        Error::Solver(msg.into())
    }

    pub fn identification(stage: &str, msg: impl Into<String>) -> Self {
        Error::Identification {
            stage: stage.to_string(),
            message: msg.into(),
        }
    }

    /// Process exit code used by the command line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) | Error::Config { .. } | Error::Io(_) => 2,
            Error::Solver(_) => 3,
            Error::Identification { .. } => 4,
        }
    }

    /// Short machine-readable label.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::Config { .. } => "config",
            Error::Solver(_) => "solver",
            Error::Identification { .. } => "identification",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
