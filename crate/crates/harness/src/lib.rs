//! Experiment runner: configuration, data preparation, training with early
//! stopping, multi-seed optimizer comparison, sensitivity sweeps and report
//! files. The `dbs` binary is a thin wrapper around [`cli::run`].

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod report;
pub mod training;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
pub use experiments::{compare_optimizers, sensitivity_sweep, ComparisonReport};
pub use report::emit_report;
pub use training::{train, train_model, train_run, RunResult};
