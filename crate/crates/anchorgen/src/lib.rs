//! Command line, configuration, checkpoints and file formats around
//! `anchorgen-core`.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use config::{parse_config, Overrides, RunConfig};
pub use error::{CliError, CliResult};
