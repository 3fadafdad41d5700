//! Experiment harness: configuration, method selection, batch evaluation
//! over sampled friction centers and seeds, and CSV exports.

pub mod config;
pub mod export;
pub mod run;

pub use config::{derive_seed, EnvironmentId, ExperimentConfig, MethodId, Settings};
pub use export::{iteration_log_csv, TrajectoryExport};
pub use run::{run_batch, run_single, Aggregate, ResultRow, ResultTable, RunOutput};
