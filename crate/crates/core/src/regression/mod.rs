//! Reward-model fitting: one-step regression, the two-step pairwise/baseline
//! procedure and K-fold cross-fitting.

mod cross_fit;
mod features;
pub mod mlp;
mod models;
mod pairs;

use serde::{Deserialize, Serialize};

use crate::error::{OffcemError, Result};

pub use cross_fit::{cross_fit, fold_of, CrossFitModel};
pub use features::{action_hot, featurize, FeatureLayout};
pub use models::{
    fit_baseline, fit_one_step, fit_pairwise, pairwise_loss, two_step_fit, BaselineModel, GridModel, Link,
    NetModel, TwoStepFit,
};
pub use pairs::{build_capped_pair_dataset, build_pair_dataset, Pair, PairDataset, PairMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    /// No hidden layers.
    Linear,
    #[default]
    Feedforward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    Squared,
    /// Logistic output with binary cross-entropy; rewards must lie in [0, 1].
    CrossEntropy,
}

/// How the cluster baseline ĝ(x,c) is represented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BaselineFamily {
    /// Tabular when the training data averages at least
    /// [`TABULAR_RECORDS_PER_CELL`] records per (context, cluster) cell,
    /// learned otherwise.
    #[default]
    Auto,
    Tabular,
    Learned,
}

/// Records per (context, cluster) cell above which `Auto` picks a tabular ĝ.
pub const TABULAR_RECORDS_PER_CELL: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub family: ModelFamily,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub loss: Loss,
    pub seed: u64,
    pub cross_fit_folds: usize,
    pub pair_mode: PairMode,
    pub max_pairs_per_context: usize,
    pub baseline: BaselineFamily,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            family: ModelFamily::Feedforward,
            hidden: vec![64, 64, 64],
            activation: Activation::Relu,
            learning_rate: 0.003,
            epochs: 30,
            batch_size: 64,
            weight_decay: 1e-4,
            loss: Loss::Squared,
            seed: 0,
            cross_fit_folds: 3,
            pair_mode: PairMode::Auto,
            max_pairs_per_context: 50,
            baseline: BaselineFamily::Auto,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Err(OffcemError::invalid("learner config", reason.to_string()));
        if self.family == ModelFamily::Feedforward && self.hidden.iter().any(|&h| h == 0) {
            return bad("hidden layer sizes must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be nonnegative");
        }
        if self.cross_fit_folds == 1 {
            return bad("cross_fit_folds must be 0 (disabled) or at least 2");
        }
        if self.max_pairs_per_context == 0 {
            return bad("max_pairs_per_context must be positive");
        }
        Ok(())
    }

    /// Hidden layer sizes after applying the model family.
    pub fn hidden_layers(&self) -> &[usize] {
        match self.family {
            ModelFamily::Linear => &[],
            ModelFamily::Feedforward => &self.hidden,
        }
    }

    pub(crate) fn settings(&self) -> mlp::TrainSettings {
        mlp::TrainSettings {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
        }
    }

    /// Same config with a different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        LearnerConfig {
            seed,
            ..self.clone()
        }
    }
}
