//! Command-line front end: dataset synthesis, training, evaluation, ablation
//! sweeps and figures.

pub mod ablation;
pub mod commands;
pub mod config;
pub mod error;
pub mod figures;

pub use error::{CliError, CliResult};
