//! Experiment orchestration: repetition loops, estimation, bounds, sweeps
//! and report files.

mod config;
mod experiment;
mod report;
mod sweep;

pub use config::{
    BoundsConfig, DpParams, EstimationConfig, ExperimentConfig, LocalModels, LossConfig, QuantizationConfig, VProtocol,
};
pub use experiment::{
    evaluate_bounds, experiment_id, recompute_bounds, run_experiment, run_experiment_with, seed_root, Environment,
    ExperimentReport, GapSummary, RepetitionRecord, RunOptions,
};
pub use report::{format_real, metrics_csv, metrics_rows, render_metrics, report_json, write_report, write_timing, ReportFile, METRICS_HEADER};
pub use sweep::{run_sweep, Axis, SweepReport};
