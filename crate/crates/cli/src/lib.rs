//! Command-line harness for the gcnfabric simulator: workload generation,
//! experiment orchestration and CSV/JSON reporting.

pub mod commands;
pub mod config;
pub mod error;
pub mod workload;

pub use commands::{run, Cli};
pub use error::CliError;
