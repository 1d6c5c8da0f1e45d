//! Library behind the `denseshift` command-line tool.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod model_file;
pub mod run;

pub use error::{CliError, CliResult};
