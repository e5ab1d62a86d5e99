//! MSE decomposition, report types and report files.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{OffcemError, Result};
use crate::estimators::EstimatorKind;
use crate::numeric::{mean, population_variance};

use super::config::{ExperimentConfig, OutputPaths, SweepAxis};

/// Header of the per-cell CSV.
pub const CSV_HEADER: [&str; 9] = [
    "sweep_axis",
    "sweep_value",
    "estimator",
    "mse",
    "squared_bias",
    "variance",
    "relative_mse",
    "replications",
    "true_value",
];

/// Header of the long-format CSV (one row per replication).
pub const LONG_CSV_HEADER: [&str; 7] = [
    "sweep_axis",
    "sweep_value",
    "estimator",
    "replication",
    "estimate",
    "true_value",
    "error",
];

/// Bias/variance split of a set of replicated estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decomposition {
    pub mse: f64,
    pub squared_bias: f64,
    pub variance: f64,
    pub bias: f64,
}

/// bias = mean − true value, variance = population variance,
/// mse = bias² + variance.
pub fn mse_decomposition(estimates: &[f64], true_value: f64) -> Result<Decomposition> {
    if estimates.is_empty() {
        return Err(OffcemError::InsufficientData { needed: 1, available: 0 });
    }
    let bias = mean(estimates) - true_value;
    let variance = population_variance(estimates);
    Ok(Decomposition {
        mse: bias * bias + variance,
        squared_bias: bias * bias,
        variance,
        bias,
    })
}

/// JSON has no NaN, so non-finite statistics travel as `null`.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() { None } else { Some(*v) }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }

    pub mod vec {
        use super::*;

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            let opts: Vec<Option<f64>> = v.iter().map(|x| if x.is_nan() { None } else { Some(*x) }).collect();
            opts.serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            let opts = Vec::<Option<f64>>::deserialize(d)?;
            Ok(opts.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
        }
    }
}

/// One (sweep value, estimator) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub sweep_axis: SweepAxis,
    pub sweep_value: f64,
    pub estimator: EstimatorKind,
    #[serde(with = "nan_as_null")]
    pub mse: f64,
    #[serde(with = "nan_as_null")]
    pub squared_bias: f64,
    #[serde(with = "nan_as_null")]
    pub variance: f64,
    #[serde(with = "nan_as_null")]
    pub relative_mse: f64,
    pub replications: usize,
    pub true_value: f64,
    /// Signed bias (mean estimate − true value).
    #[serde(with = "nan_as_null")]
    pub bias: f64,
    /// Standard error of the mean estimate, sqrt(variance / R).
    #[serde(with = "nan_as_null")]
    pub bias_std_error: f64,
    /// Per-replication estimates, NaN where the estimator failed.
    #[serde(with = "nan_as_null::vec")]
    pub estimates: Vec<f64>,
    /// First error seen in this cell; statistics are NaN when set.
    pub error: Option<String>,
}

impl ReportRow {
    /// Aggregates per-replication results. Any failure makes the cell NaN.
    pub fn from_results(
        sweep_axis: SweepAxis,
        sweep_value: f64,
        estimator: EstimatorKind,
        true_value: f64,
        results: &[std::result::Result<f64, String>],
    ) -> Self {
        let estimates: Vec<f64> = results.iter().map(|r| *r.as_ref().unwrap_or(&f64::NAN)).collect();
        let error = results.iter().find_map(|r| r.as_ref().err().cloned());
        let d = match (&error, mse_decomposition(&estimates, true_value)) {
            (None, Ok(d)) => d,
            _ => Decomposition {
                mse: f64::NAN,
                squared_bias: f64::NAN,
                variance: f64::NAN,
                bias: f64::NAN,
            },
        };
        ReportRow {
            sweep_axis,
            sweep_value,
            estimator,
            mse: d.mse,
            squared_bias: d.squared_bias,
            variance: d.variance,
            relative_mse: d.mse / (true_value * true_value),
            replications: results.len(),
            true_value,
            bias: d.bias,
            bias_std_error: (d.variance / results.len() as f64).sqrt(),
            estimates,
            error,
        }
    }

    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub config_hash: String,
    pub master_seed: u64,
    pub wall_time_secs: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub rows: Vec<ReportRow>,
    pub metadata: ReportMetadata,
}

impl ExperimentReport {
    /// The row for (`value`, `estimator`), if present.
    pub fn row(&self, value: f64, estimator: EstimatorKind) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.sweep_value == value && r.estimator == estimator)
    }
}

// ── Output ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    LongCsv,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Csv, ReportFormat::Json, ReportFormat::LongCsv];
}

fn csv_error(path: &Path, e: csv::Error) -> OffcemError {
    OffcemError::Csv {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Per-cell CSV. Contains no timing, so equal reports give equal bytes.
pub fn write_csv<W: Write>(report: &ExperimentReport, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in &report.rows {
        w.write_record([
            r.sweep_axis.as_str().to_string(),
            r.sweep_value.to_string(),
            r.estimator.as_str().to_string(),
            r.mse.to_string(),
            r.squared_bias.to_string(),
            r.variance.to_string(),
            r.relative_mse.to_string(),
            r.replications.to_string(),
            r.true_value.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per (cell, replication) for external plotting.
pub fn write_long_csv<W: Write>(report: &ExperimentReport, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LONG_CSV_HEADER)?;
    for r in &report.rows {
        for (i, e) in r.estimates.iter().enumerate() {
            w.write_record([
                r.sweep_axis.as_str().to_string(),
                r.sweep_value.to_string(),
                r.estimator.as_str().to_string(),
                i.to_string(),
                e.to_string(),
                r.true_value.to_string(),
                if e.is_nan() { r.error.clone().unwrap_or_default() } else { String::new() },
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes the requested formats under `paths.dir`, creating it if needed,
/// and returns the written paths.
pub fn emit_report(report: &ExperimentReport, paths: &OutputPaths, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    let io_err = |path: &Path, e: std::io::Error| OffcemError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    std::fs::create_dir_all(&paths.dir).map_err(|e| io_err(&paths.dir, e))?;
    let mut written = Vec::new();
    for &format in formats {
        let name = match format {
            ReportFormat::Csv => &paths.csv,
            ReportFormat::Json => &paths.json,
            ReportFormat::LongCsv => &paths.long_csv,
        };
        let path = paths.dir.join(name);
        let file = File::create(&path).map_err(|e| io_err(&path, e))?;
        match format {
            ReportFormat::Csv => write_csv(report, file).map_err(|e| csv_error(&path, e))?,
            ReportFormat::LongCsv => write_long_csv(report, file).map_err(|e| csv_error(&path, e))?,
            ReportFormat::Json => serde_json::to_writer_pretty(file, report).map_err(|e| OffcemError::Json {
                path: path.clone(),
                source: e,
            })?,
        }
        written.push(path);
    }
    Ok(written)
}

/// Reads a JSON report written by [`emit_report`].
pub fn read_json_report(path: &Path) -> Result<ExperimentReport> {
    let file = File::open(path).map_err(|e| OffcemError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| OffcemError::Json {
        path: path.to_path_buf(),
        source: e,
    })
}
