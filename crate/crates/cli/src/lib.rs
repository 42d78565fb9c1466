//! Orchestration layer: checkpoint files, presets, corpus batching, run
//! loops, and the command implementations behind the `flmgrow` binary.

pub mod ckptio;
pub mod commands;
pub mod corpus;
pub mod error;
pub mod parallel;
pub mod presets;
pub mod report;
pub mod runner;
pub mod samples;

pub use error::{AppError, Result};
