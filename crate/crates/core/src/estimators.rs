//! Point estimators of V(π): DM, IPS, DR, MIPS, OffCEM and the ablations
//! `plus_clustering`, `plus_regression` and `clustering_onestep`.
//!
//! Every estimator is a sample mean of per-record terms. [`TermEvaluator`]
//! computes one record's term and is shared with the exact oracle.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{ActionCatalog, LoggedDataset, Policy, RewardModel};
use crate::error::{OffcemError, Result};
use crate::numeric::{mean, pairwise_sum, safe_ratio};
use crate::weights::{Grouping, WeightTable};

// ── Kinds and specs ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Dm,
    Ips,
    Dr,
    Mips,
    Offcem,
    PlusClustering,
    PlusRegression,
    ClusteringOnestep,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 8] = [
        EstimatorKind::Dm,
        EstimatorKind::Ips,
        EstimatorKind::Dr,
        EstimatorKind::Mips,
        EstimatorKind::Offcem,
        EstimatorKind::PlusClustering,
        EstimatorKind::PlusRegression,
        EstimatorKind::ClusteringOnestep,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Dm => "dm",
            EstimatorKind::Ips => "ips",
            EstimatorKind::Dr => "dr",
            EstimatorKind::Mips => "mips",
            EstimatorKind::Offcem => "offcem",
            EstimatorKind::PlusClustering => "plus_clustering",
            EstimatorKind::PlusRegression => "plus_regression",
            EstimatorKind::ClusteringOnestep => "clustering_onestep",
        }
    }

    pub fn needs_model(self) -> bool {
        matches!(
            self,
            EstimatorKind::Dm
                | EstimatorKind::Dr
                | EstimatorKind::Offcem
                | EstimatorKind::PlusRegression
                | EstimatorKind::ClusteringOnestep
        )
    }

    /// Kinds whose weights marginalize over groups and so need the full
    /// logging-policy table, not just logged propensities.
    pub fn needs_logging_policy(self) -> bool {
        self.grouping().is_some()
    }

    fn grouping(self) -> Option<Grouping> {
        match self {
            EstimatorKind::Mips | EstimatorKind::PlusRegression => Some(Grouping::Embedding),
            EstimatorKind::Offcem | EstimatorKind::PlusClustering | EstimatorKind::ClusteringOnestep => {
                Some(Grouping::Cluster)
            }
            _ => None,
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = OffcemError;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| OffcemError::invalid("estimator kind", format!("unknown estimator `{s}`")))
    }
}

/// How much of the support assumption an estimator verifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportCheck {
    /// Only the weights actually evaluated on logged records must exist.
    /// Deficient support then shows up as bias rather than an error.
    #[default]
    Observed,
    /// Every context present in the data must satisfy the estimator's
    /// support assumption; requires the logging-policy table.
    Full,
}

/// An estimator kind plus its regression model and options.
#[derive(Clone)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    pub model: Option<Arc<dyn RewardModel>>,
    /// Upper bound applied to importance weights. Off by default.
    pub clip: Option<f64>,
    pub support: SupportCheck,
}

impl fmt::Debug for EstimatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EstimatorSpec")
            .field("kind", &self.kind)
            .field("model", &self.model.as_ref().map(|_| "<model>"))
            .field("clip", &self.clip)
            .field("support", &self.support)
            .finish()
    }
}

impl EstimatorSpec {
    pub fn new(kind: EstimatorKind) -> Self {
        EstimatorSpec {
            kind,
            model: None,
            clip: None,
            support: SupportCheck::Observed,
        }
    }

    pub fn with_model(mut self, model: Arc<dyn RewardModel>) -> Self {
        self.model = Some(model);
        self
    }

    pub fn with_clip(mut self, clip: f64) -> Self {
        self.clip = Some(clip);
        self
    }

    pub fn with_support(mut self, support: SupportCheck) -> Self {
        self.support = support;
        self
    }
}

// ── Per-record terms ────────────────────────────────────────────────────

/// Precomputed pieces needed to evaluate one estimator's per-record term.
pub struct TermEvaluator<'a> {
    kind: EstimatorKind,
    model: Option<&'a dyn RewardModel>,
    pi: &'a Policy,
    catalog: &'a ActionCatalog,
    weights: Option<WeightTable>,
    /// f̂(x, π) per context, when the kind uses a model.
    model_value: Vec<f64>,
    clip: Option<f64>,
}

impl<'a> TermEvaluator<'a> {
    /// `contexts` lists the contexts whose support is verified under
    /// [`SupportCheck::Full`].
    pub fn new(
        spec: &'a EstimatorSpec,
        pi: &'a Policy,
        pi0: Option<&Policy>,
        catalog: &'a ActionCatalog,
        contexts: &[usize],
    ) -> Result<Self> {
        let kind = spec.kind;
        pi.check_shape(pi.num_contexts(), catalog.num_actions())?;
        catalog.check_contexts(pi.num_contexts())?;
        if let Some(p0) = pi0 {
            pi.check_shape(p0.num_contexts(), p0.num_actions())?;
        }
        let model = if kind.needs_model() {
            Some(
                spec.model
                    .as_deref()
                    .ok_or(OffcemError::MissingModel { kind: kind.as_str() })?,
            )
        } else {
            None
        };
        let weights = match kind.grouping() {
            Some(grouping) => {
                let p0 = pi0.ok_or(OffcemError::MissingLoggingPolicy { kind: kind.as_str() })?;
                Some(WeightTable::new(pi, p0, catalog, grouping)?)
            }
            None => None,
        };
        if spec.support == SupportCheck::Full {
            match &weights {
                Some(table) => {
                    if let Some((x, g)) = table.first_violation(contexts) {
                        return Err(table.get(x, g).unwrap_err());
                    }
                }
                None if kind != EstimatorKind::Dm => {
                    let p0 = pi0.ok_or(OffcemError::MissingLoggingPolicy { kind: kind.as_str() })?;
                    for &x in contexts {
                        if let Some(a) = (0..pi.num_actions()).find(|&a| pi.prob(x, a) > 0.0 && p0.prob(x, a) == 0.0) {
                            return Err(OffcemError::ActionSupport { context: x, action: a });
                        }
                    }
                }
                None => {}
            }
        }
        let model_value = match model {
            Some(m) => (0..pi.num_contexts())
                .map(|x| {
                    let terms: Vec<f64> = pi
                        .row(x)
                        .iter()
                        .enumerate()
                        .filter(|(_, p)| **p > 0.0)
                        .map(|(a, p)| p * m.predict(x, a))
                        .collect();
                    pairwise_sum(&terms)
                })
                .collect(),
            None => Vec::new(),
        };
        Ok(TermEvaluator {
            kind,
            model,
            pi,
            catalog,
            weights,
            model_value,
            clip: spec.clip,
        })
    }

    fn clipped(&self, w: f64) -> f64 {
        match self.clip {
            Some(c) => w.min(c),
            None => w,
        }
    }

    fn vanilla(&self, x: usize, a: usize, propensity: f64) -> Result<f64> {
        safe_ratio(self.pi.prob(x, a), propensity)
            .map(|w| self.clipped(w))
            .ok_or(OffcemError::ActionSupport { context: x, action: a })
    }

    fn grouped(&self, x: usize, a: usize) -> Result<f64> {
        let table = self.weights.as_ref().expect("grouped estimator has a weight table");
        let g = match table.grouping() {
            Grouping::Cluster => self.catalog.cluster_of(x, a),
            Grouping::Embedding => self.catalog.embedding_of(a),
        };
        table.get(x, g).map(|w| self.clipped(w))
    }

    /// Term for a record `(x, a, r)` logged with `propensity`, at position
    /// `index` of the dataset (used by cross-fitted models).
    pub fn term(&self, index: usize, x: usize, a: usize, propensity: f64, reward: f64) -> Result<f64> {
        let fitted = |m: &dyn RewardModel| m.predict_logged(index, x, a);
        Ok(match self.kind {
            EstimatorKind::Dm => self.model_value[x],
            EstimatorKind::Ips => self.vanilla(x, a, propensity)? * reward,
            EstimatorKind::Dr => {
                let m = self.model.expect("dr has a model");
                self.vanilla(x, a, propensity)? * (reward - fitted(m)) + self.model_value[x]
            }
            EstimatorKind::Mips | EstimatorKind::PlusClustering => self.grouped(x, a)? * reward,
            EstimatorKind::Offcem | EstimatorKind::ClusteringOnestep | EstimatorKind::PlusRegression => {
                let m = self.model.expect("model-based kind has a model");
                self.grouped(x, a)? * (reward - fitted(m)) + self.model_value[x]
            }
        })
    }
}

/// Per-record terms of `spec` on `data`, in record order.
pub fn per_record_terms(data: &LoggedDataset, pi: &Policy, pi0: Option<&Policy>, spec: &EstimatorSpec) -> Result<Vec<f64>> {
    pi.check_shape(data.contexts().len(), data.catalog().num_actions())?;
    let observed = if spec.support == SupportCheck::Full {
        data.observed_contexts()
    } else {
        Vec::new()
    };
    let eval = TermEvaluator::new(spec, pi, pi0, data.catalog(), &observed)?;
    data.records()
        .par_iter()
        .enumerate()
        .map(|(i, r)| eval.term(i, r.context, r.action, r.propensity, r.reward))
        .collect()
}

/// The estimate: mean of the per-record terms (pairwise summation, so the
/// result does not depend on the number of worker threads).
pub fn estimate(data: &LoggedDataset, pi: &Policy, pi0: Option<&Policy>, spec: &EstimatorSpec) -> Result<f64> {
    if data.is_empty() {
        return Err(OffcemError::InsufficientData { needed: 1, available: 0 });
    }
    Ok(mean(&per_record_terms(data, pi, pi0, spec)?))
}

// ── Named entry points ──────────────────────────────────────────────────

fn with_model(kind: EstimatorKind, model: &Arc<dyn RewardModel>) -> EstimatorSpec {
    EstimatorSpec::new(kind).with_model(Arc::clone(model))
}

/// (1/n) Σ_i Σ_a π(a|x_i) q̂(x_i,a).
pub fn estimate_dm(data: &LoggedDataset, pi: &Policy, model: &Arc<dyn RewardModel>) -> Result<f64> {
    estimate(data, pi, None, &with_model(EstimatorKind::Dm, model))
}

/// (1/n) Σ_i w(x_i,a_i) r_i with logged propensities.
pub fn estimate_ips(data: &LoggedDataset, pi: &Policy) -> Result<f64> {
    estimate(data, pi, None, &EstimatorSpec::new(EstimatorKind::Ips))
}

/// (1/n) Σ_i { w(x_i,a_i)(r_i − q̂(x_i,a_i)) + q̂(x_i,π) }.
pub fn estimate_dr(data: &LoggedDataset, pi: &Policy, model: &Arc<dyn RewardModel>) -> Result<f64> {
    estimate(data, pi, None, &with_model(EstimatorKind::Dr, model))
}

/// (1/n) Σ_i w(x_i,e_i) r_i with deterministic-embedding marginals.
pub fn estimate_mips(data: &LoggedDataset, pi: &Policy, pi0: &Policy) -> Result<f64> {
    estimate(data, pi, Some(pi0), &EstimatorSpec::new(EstimatorKind::Mips))
}

/// (1/n) Σ_i { w(x_i,φ(x_i,a_i))(r_i − f̂(x_i,a_i)) + f̂(x_i,π) }.
pub fn estimate_offcem(data: &LoggedDataset, pi: &Policy, pi0: &Policy, model: &Arc<dyn RewardModel>) -> Result<f64> {
    estimate(data, pi, Some(pi0), &with_model(EstimatorKind::Offcem, model))
}

/// One of the ablations; `model` is ignored by `plus_clustering`.
pub fn estimate_ablation(
    data: &LoggedDataset,
    pi: &Policy,
    pi0: &Policy,
    model: Option<&Arc<dyn RewardModel>>,
    kind: EstimatorKind,
) -> Result<f64> {
    if !matches!(
        kind,
        EstimatorKind::PlusClustering | EstimatorKind::PlusRegression | EstimatorKind::ClusteringOnestep
    ) {
        return Err(OffcemError::invalid("ablation kind", format!("`{kind}` is not an ablation")));
    }
    let mut spec = EstimatorSpec::new(kind);
    spec.model = model.cloned();
    estimate(data, pi, Some(pi0), &spec)
}
