//! Error type for the IO layer and the process exit-code mapping.

use std::fmt;

#[derive(Debug)]
pub enum AppError {
    /// Bad configuration or command-line usage. Exit code 2.
    Config(String),
    /// Malformed, truncated, or checksum-failing data files. Exit code 3.
    Data(String),
    /// Non-finite values during training or evaluation. Exit code 4.
    Numeric(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, AppError>;

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppError::Config(m) => write!(f, "config error: {m}"),
            AppError::Data(m) => write!(f, "data error: {m}"),
            AppError::Numeric(m) => write!(f, "numeric error: {m}"),
            AppError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for AppError {}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Io(e)
    }
}

impl From<ducos_core::CoreError> for AppError {
    fn from(e: ducos_core::CoreError) -> Self {
        match e {
            ducos_core::CoreError::NonFinite(m) => AppError::Numeric(m.to_string()),
            other => AppError::Config(other.to_string()),
        }
    }
}

impl AppError {
    /// Process exit code: 2 config, 3 data, 4 numeric abort. IO failures
    /// count as data problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 2,
            AppError::Data(_) | AppError::Io(_) => 3,
            AppError::Numeric(_) => 4,
        }
    }
}
