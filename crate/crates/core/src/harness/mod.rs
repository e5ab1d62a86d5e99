//! Experiment orchestration: configuration, sweeps, MSE decomposition and
//! report files.

mod config;
mod report;
mod sweep;

pub use config::{ExperimentConfig, ModelSource, OutputPaths, SweepAxis};
pub use report::{
    emit_report, mse_decomposition, read_json_report, write_csv, write_long_csv, Decomposition,
    ExperimentReport, ReportFormat, ReportMetadata, ReportRow, CSV_HEADER, LONG_CSV_HEADER,
};
pub use sweep::{fit_model_for, prepare_cell, replication_seed, run_replication, run_sweep, CellSetup};
