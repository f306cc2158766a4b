//! Command-line front end: config files, checkpoints and CSV export.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;

pub use error::{CliError, Result};
