//! Command-line pipeline and HTTP service over `act2g-core`.

pub mod commands;
pub mod service;

pub use commands::{run, Cli, CliError};
