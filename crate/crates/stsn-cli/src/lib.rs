//! IO, file formats and command implementations behind the `stsn` binary.

pub mod archive;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod csvio;
pub mod error;
pub mod pgm;

pub use error::{CliError, ExitCode};
