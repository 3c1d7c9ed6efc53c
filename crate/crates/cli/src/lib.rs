//! Command-line pipeline: tensor containers, configuration, run
//! directories, the CMRxRecon loader and the `kpinr` subcommands.

pub mod archive;
pub mod cli;
pub mod config;
pub mod container;
pub mod error;
pub mod loader;
pub mod pipeline;
pub mod rundir;

pub use cli::run;
pub use error::{CliError, Result};
