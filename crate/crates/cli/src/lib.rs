//! Library side of the `polyseg` command: configuration and subcommands.

pub mod commands;
pub mod config;

pub use config::{ConfigError, RunConfig};
