//! Library side of the `causalign` command: subcommands, config overlay,
//! run manifests, file formats and experiment drivers.

pub mod commands;
pub mod config;
pub mod files;
pub mod manifest;
pub mod plot;
pub mod studies;

pub use commands::{run, Cli, Command};
