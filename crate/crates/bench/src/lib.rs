//! Experiment runner for the simulated cluster.
//!
//! An [`ExperimentConfig`] describes a grid of input sizes and added
//! cold-start delays for one workload and storage kind. [`run`] executes
//! every point in both modes, streams raw [`MeasurementRecord`]s to
//! `records.jsonl` and writes per-point means, deviations and improvement
//! figures to `summary.csv` and `summary.json`.
//!
//! [`MeasurementRecord`]: truffle_sim::MeasurementRecord

pub mod config;
pub mod runner;
pub mod summary;

pub use config::{ClusterOverrides, ConfigError, ExperimentConfig, Workload};
pub use runner::{run, run_point, summarize_dir, GridPoint, RunError, RunOutcome};
pub use summary::{improvement_pct, mean_stddev, summarize, SummaryRow};

/// Environment variable that overrides a config's `scale_factor`.
pub const SCALE_ENV: &str = "TRUFFLE_SCALE";
