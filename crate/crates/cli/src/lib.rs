//! Command-line shell around `gmd-core`: configuration, checkpoint and
//! dataset files, CSV and SVG output.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset_file;
pub mod error;
pub mod inputs;
pub mod render;
pub mod tasks;
pub mod training;

pub use commands::{run, Cli};
pub use error::{CliError, CliResult};
