//! Library half of the binary: config documents, checkpoint files, and the
//! subcommand implementations, kept callable so tests drive them in-process.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;

pub use error::{CliError, Result};
