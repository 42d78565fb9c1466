//! CLI error type with stable process exit codes.

use std::fmt;

use flmgrow_core::CoreError;

/// Exit codes: 0 success, 2 validation, 3 numerical, 4 I/O.
#[derive(Debug)]
pub enum AppError {
    /// Bad config, plan, arguments, or file contents.
    Validation(String),
    /// Non-finite results or a failed numerical gate.
    Numerical(String),
    /// Filesystem and serialization transport failures.
    Io(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Validation(_) => 2,
            AppError::Numerical(_) => 3,
            AppError::Io(_) => 4,
        }
    }
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppError::Validation(m) => write!(f, "validation error: {m}"),
            AppError::Numerical(m) => write!(f, "numerical error: {m}"),
            AppError::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl std::error::Error for AppError {}

impl From<CoreError> for AppError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Numerical(m) => AppError::Numerical(m),
            other => AppError::Validation(other.to_string()),
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for AppError {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            AppError::Io(e.to_string())
        } else {
            AppError::Validation(format!("malformed JSON: {e}"))
        }
    }
}

pub type Result<T> = std::result::Result<T, AppError>;
