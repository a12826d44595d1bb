//! Command-line front end for the tracker: configuration, file formats and
//! the subcommand pipelines.

pub mod commands;
pub mod config;
pub mod error;
pub mod selftest;
pub mod trackfile;
pub mod weights;

pub use config::RunConfig;
pub use error::{CliError, Result};
