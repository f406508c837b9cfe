//! Experiment runner: configuration, single runs and noise sweeps, loss
//! smoothing, and on-disk outputs.

pub mod config;
pub mod output;
pub mod run;
pub mod smooth;

pub use config::{RunConfig, DEFAULT_SWEEP};
pub use output::{replay_epsilon, write_outputs, write_sweep};
pub use run::{run, sweep, RunLog, RunSummary, StepRow, SweepEntry};
pub use smooth::{smooth_series, Smoothing};
