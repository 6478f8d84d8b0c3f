//! Experiment harness for `fedlodrop-core`: TOML configuration, data and
//! result file formats, the per-round allocate/train loop, method
//! comparisons and the `fedlodrop` command line.

pub mod config;
pub mod error;
pub mod experiment;
pub mod io;

pub use config::{ExperimentConfig, Scheme};
pub use error::{HarnessError, Result};
pub use experiment::{compare_methods, emit_results, run_experiment, ExperimentResult};
