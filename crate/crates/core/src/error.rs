//! Error type shared by all core modules.

use alloc::string::String;

/// Failure categories surfaced by core operations.
///
/// `Shape` and `Config` are validation failures, `Input` covers bad runtime
/// data (out-of-range tokens, empty loss masks), `Plan` covers rejected
/// growth plans, and `Numerical` covers non-finite results.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoreError {
    Shape(String),
    Config(String),
    Input(String),
    Plan(String),
    Contract(String),
    Numerical(String),
}

impl core::fmt::Display for CoreError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            CoreError::Shape(m) => write!(f, "shape error: {m}"),
            CoreError::Config(m) => write!(f, "config error: {m}"),
            CoreError::Input(m) => write!(f, "input error: {m}"),
            CoreError::Plan(m) => write!(f, "plan error: {m}"),
            CoreError::Contract(m) => write!(f, "contract error: {m}"),
            CoreError::Numerical(m) => write!(f, "numerical error: {m}"),
        }
    }
}

impl core::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
