//! Experiment harness: configs, checkpoints, evaluation, the stage pipeline
//! and reports.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod report;

pub use checkpoint::Checkpoint;
pub use config::{ExperimentConfig, Stage, Variant};
pub use error::{Error, Result};
pub use pipeline::{run_config, run_experiment, RunOutputs};
