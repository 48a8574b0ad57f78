//! Command-line front end: run configuration, training loop, evaluation,
//! verification suites and SVG plots.

pub mod config;
pub mod plot;
pub mod train;
pub mod verify;

pub use config::{Algorithm, RunConfig};

/// Environment variable naming the root directory for run directories.
pub const RUNS_ENV: &str = "EQUIRL_RUNS";
