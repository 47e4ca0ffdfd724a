//! Command-line pipeline: dataset generation, training, querying, metrics
//! and reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod ply;
pub mod prediction;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
