//! Library behind the `homcar` command-line tool.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod graph_input;
pub mod io;

pub use error::{CliError, CliResult, Outcome};
