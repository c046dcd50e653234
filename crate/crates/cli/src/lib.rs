//! Dataset handling, configuration and the `relcorr` command surface.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
mod error;
pub mod synth;
pub mod train;

pub use error::{CliError, Result};
