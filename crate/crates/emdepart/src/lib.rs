//! File formats and the command line for `emdepart-core`.

pub mod checkpoint;
pub mod cli;
pub mod config_file;
pub mod dataset;
pub mod error;

pub use error::{CliError, Result};
