//! Experiment configs, datasets, reports, sweeps and verification suites.

pub mod config;
pub mod dataset;
pub mod report;
pub mod sweep;
pub mod verify;

pub use config::{ExperimentConfig, SweepGrid};
pub use dataset::{cmd_gen, Dataset};
pub use report::{cmd_run, compute_optimal_iteration_stats, run_experiment, ExperimentReport, OptimalIterationStats};
pub use sweep::{cmd_sweep, run_sweep, sweep_csv, SweepRow};
pub use verify::{run_verify, Suite, Verdict, VerifyOptions, VerifyReport};
