//! Experiment configuration.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{OffcemError, Result};
use crate::estimators::EstimatorKind;
use crate::regression::LearnerConfig;
use crate::synthetic::EnvironmentSpec;

/// The quantity varied across sweep cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    N,
    NumActions,
    NumUnsupported,
    Epsilon,
    Beta,
    Sigma,
    NumClusters,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::N => "n",
            SweepAxis::NumActions => "num_actions",
            SweepAxis::NumUnsupported => "num_unsupported",
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::Beta => "beta",
            SweepAxis::Sigma => "sigma",
            SweepAxis::NumClusters => "num_clusters",
        }
    }

    /// Axes whose values must be nonnegative integers.
    pub fn is_count(self) -> bool {
        matches!(
            self,
            SweepAxis::N | SweepAxis::NumActions | SweepAxis::NumUnsupported | SweepAxis::NumClusters
        )
    }

    /// Axes that change the generated environment.
    pub fn changes_environment(self) -> bool {
        matches!(self, SweepAxis::NumActions | SweepAxis::Sigma | SweepAxis::NumClusters)
    }
}

/// Where the regression models come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    /// Fit on each replication's logged data.
    #[default]
    Fitted,
    /// Use the true expected reward table (no fitting).
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputPaths {
    pub dir: PathBuf,
    pub csv: String,
    pub json: String,
    pub long_csv: String,
}

impl Default for OutputPaths {
    fn default() -> Self {
        OutputPaths {
            dir: PathBuf::from("results"),
            csv: "report.csv".into(),
            json: "report.json".into(),
            long_csv: "estimates_long.csv".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub environment: EnvironmentSpec,
    /// Logged records per replication when n is not the sweep axis.
    pub sample_size: usize,
    /// Inverse temperature of the softmax logging policy.
    pub beta: f64,
    /// Exploration rate of the ε-greedy target policy.
    pub epsilon: f64,
    /// Actions given zero logging probability.
    pub num_unsupported: usize,
    pub sweep_axis: SweepAxis,
    pub sweep_values: Vec<f64>,
    pub estimators: Vec<EstimatorKind>,
    pub learner: LearnerConfig,
    pub model_source: ModelSource,
    pub replications: usize,
    /// Seeds the per-replication streams. The environment is seeded by
    /// `environment.master_seed`.
    pub master_seed: u64,
    pub output: OutputPaths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            environment: EnvironmentSpec::default(),
            sample_size: 3000,
            beta: -0.1,
            epsilon: 0.2,
            num_unsupported: 0,
            sweep_axis: SweepAxis::N,
            sweep_values: vec![3000.0],
            estimators: vec![
                EstimatorKind::Dm,
                EstimatorKind::Ips,
                EstimatorKind::Dr,
                EstimatorKind::Mips,
                EstimatorKind::Offcem,
            ],
            learner: LearnerConfig::default(),
            model_source: ModelSource::Fitted,
            replications: 300,
            master_seed: 0,
            output: OutputPaths::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(OffcemError::invalid("experiment config", reason));
        if self.sweep_values.is_empty() {
            return bad("sweep_values must be nonempty".into());
        }
        if self.replications == 0 {
            return bad("replications must be at least 1".into());
        }
        if self.estimators.is_empty() {
            return bad("estimators must be nonempty".into());
        }
        if let Some(v) = self.sweep_values.iter().find(|v| !v.is_finite()) {
            return bad(format!("sweep value {v} is not finite"));
        }
        if self.sweep_axis.is_count() {
            if let Some(v) = self.sweep_values.iter().find(|v| **v < 0.0 || v.fract() != 0.0) {
                return bad(format!("{} value {v} is not a nonnegative integer", self.sweep_axis.as_str()));
            }
        }
        for &v in &self.sweep_values {
            self.cell(v).validate_cell()?;
        }
        self.learner.validate()
    }

    /// The config with the sweep axis set to `value`.
    pub fn cell(&self, value: f64) -> ExperimentConfig {
        let mut c = self.clone();
        match self.sweep_axis {
            SweepAxis::N => c.sample_size = value as usize,
            SweepAxis::NumActions => c.environment.num_actions = value as usize,
            SweepAxis::NumUnsupported => c.num_unsupported = value as usize,
            SweepAxis::Epsilon => c.epsilon = value,
            SweepAxis::Beta => c.beta = value,
            SweepAxis::Sigma => c.environment.reward_noise = value,
            SweepAxis::NumClusters => c.environment.num_clusters = value as usize,
        }
        c
    }

    /// Current value of the sweep axis.
    pub fn cell_value(&self) -> f64 {
        match self.sweep_axis {
            SweepAxis::N => self.sample_size as f64,
            SweepAxis::NumActions => self.environment.num_actions as f64,
            SweepAxis::NumUnsupported => self.num_unsupported as f64,
            SweepAxis::Epsilon => self.epsilon,
            SweepAxis::Beta => self.beta,
            SweepAxis::Sigma => self.environment.reward_noise,
            SweepAxis::NumClusters => self.environment.num_clusters as f64,
        }
    }

    fn validate_cell(&self) -> Result<()> {
        self.environment.validate()?;
        let bad = |reason: String| Err(OffcemError::invalid("experiment config", reason));
        if self.sample_size == 0 {
            return bad("sample_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad(format!("epsilon {} outside [0, 1]", self.epsilon));
        }
        if !self.beta.is_finite() {
            return bad("beta must be finite".into());
        }
        if self.num_unsupported >= self.environment.num_actions {
            return bad(format!(
                "num_unsupported {} leaves no supported action among {}",
                self.num_unsupported, self.environment.num_actions
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
