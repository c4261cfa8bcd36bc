//! Experiment harness for voxseg: synthetic data, training, evaluation,
//! gradient checks and checkpoint inspection.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod train;

pub use cli::{run, Cli, Command};
pub use error::CliError;
