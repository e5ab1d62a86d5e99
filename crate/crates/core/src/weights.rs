//! Importance weights: vanilla w(x,a), cluster w(x,c) and embedding-marginal
//! w(x,e), plus precomputed per-context weight tables for the estimators.

use crate::domain::{ActionCatalog, Policy};
use crate::error::{OffcemError, Result};
use crate::numeric::{pairwise_sum, safe_ratio};

fn check_pair(pi: &Policy, pi0: &Policy, catalog: &ActionCatalog) -> Result<()> {
    pi.check_shape(pi0.num_contexts(), pi0.num_actions())?;
    pi.check_shape(pi.num_contexts(), catalog.num_actions())?;
    catalog.check_contexts(pi.num_contexts())
}

fn check_context(policy: &Policy, x: usize) -> Result<()> {
    if x >= policy.num_contexts() {
        return Err(OffcemError::invalid(
            "context id",
            format!("{x} out of range for {} contexts", policy.num_contexts()),
        ));
    }
    Ok(())
}

/// w(x,a) = π(a|x) / π₀(a|x), with 0/0 = 0.
pub fn vanilla_weight(pi: &Policy, pi0: &Policy, x: usize, a: usize) -> Result<f64> {
    pi.check_shape(pi0.num_contexts(), pi0.num_actions())?;
    check_context(pi, x)?;
    if a >= pi.num_actions() {
        return Err(OffcemError::invalid("action id", format!("{a} out of range")));
    }
    safe_ratio(pi.prob(x, a), pi0.prob(x, a))
        .ok_or(OffcemError::ActionSupport { context: x, action: a })
}

fn grouped_marginal(policy: &Policy, groups: usize, group_of: impl Fn(usize) -> usize, x: usize) -> Vec<f64> {
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); groups];
    for (a, p) in policy.row(x).iter().enumerate() {
        buckets[group_of(a)].push(*p);
    }
    buckets.iter().map(|b| pairwise_sum(b)).collect()
}

/// π(c|x) = Σ_a 𝕀{φ(x,a)=c} π(a|x) for every cluster c.
pub fn cluster_marginal(policy: &Policy, catalog: &ActionCatalog, x: usize) -> Result<Vec<f64>> {
    policy.check_shape(policy.num_contexts(), catalog.num_actions())?;
    catalog.check_contexts(policy.num_contexts())?;
    check_context(policy, x)?;
    Ok(grouped_marginal(policy, catalog.num_clusters(), |a| catalog.cluster_of(x, a), x))
}

/// π(e|x) = Σ_{a: e_a = e} π(a|x) for every embedding e.
pub fn embedding_marginal(policy: &Policy, catalog: &ActionCatalog, x: usize) -> Result<Vec<f64>> {
    policy.check_shape(policy.num_contexts(), catalog.num_actions())?;
    check_context(policy, x)?;
    Ok(grouped_marginal(policy, catalog.num_embeddings(), |a| catalog.embedding_of(a), x))
}

/// w(x,c) = π(c|x) / π₀(c|x).
pub fn cluster_weight(pi: &Policy, pi0: &Policy, catalog: &ActionCatalog, x: usize, c: usize) -> Result<f64> {
    check_pair(pi, pi0, catalog)?;
    if c >= catalog.num_clusters() {
        return Err(OffcemError::invalid("cluster id", format!("{c} out of range")));
    }
    let num = cluster_marginal(pi, catalog, x)?[c];
    let den = cluster_marginal(pi0, catalog, x)?[c];
    safe_ratio(num, den).ok_or(OffcemError::ClusterSupport { context: x, cluster: c })
}

/// w(x,e) = π(e|x) / π₀(e|x) for deterministic embeddings.
pub fn embedding_marginal_weight(
    pi: &Policy,
    pi0: &Policy,
    catalog: &ActionCatalog,
    x: usize,
    e: usize,
) -> Result<f64> {
    check_pair(pi, pi0, catalog)?;
    if e >= catalog.num_embeddings() {
        return Err(OffcemError::invalid("embedding id", format!("{e} out of range")));
    }
    let num = embedding_marginal(pi, catalog, x)?[e];
    let den = embedding_marginal(pi0, catalog, x)?[e];
    safe_ratio(num, den).ok_or(OffcemError::EmbeddingSupport { context: x, embedding: e })
}

// ── Precomputed tables ──────────────────────────────────────────────────

/// Which grouping of actions a [`WeightTable`] marginalizes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    Cluster,
    Embedding,
}

/// Per-context marginal weights for every group. Entries are `None` where
/// the target has mass but the logging policy has none.
#[derive(Debug, Clone)]
pub struct WeightTable {
    grouping: Grouping,
    weights: Vec<Vec<Option<f64>>>,
}

impl WeightTable {
    pub fn new(pi: &Policy, pi0: &Policy, catalog: &ActionCatalog, grouping: Grouping) -> Result<Self> {
        check_pair(pi, pi0, catalog)?;
        let weights = (0..pi.num_contexts())
            .map(|x| {
                let (num, den) = match grouping {
                    Grouping::Cluster => (
                        cluster_marginal(pi, catalog, x)?,
                        cluster_marginal(pi0, catalog, x)?,
                    ),
                    Grouping::Embedding => (
                        embedding_marginal(pi, catalog, x)?,
                        embedding_marginal(pi0, catalog, x)?,
                    ),
                };
                Ok(num.iter().zip(&den).map(|(n, d)| safe_ratio(*n, *d)).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(WeightTable { grouping, weights })
    }

    pub fn grouping(&self) -> Grouping {
        self.grouping
    }

    /// Weight of group `g` in context `x`, or the matching support error.
    pub fn get(&self, x: usize, g: usize) -> Result<f64> {
        self.weights[x][g].ok_or(match self.grouping {
            Grouping::Cluster => OffcemError::ClusterSupport { context: x, cluster: g },
            Grouping::Embedding => OffcemError::EmbeddingSupport { context: x, embedding: g },
        })
    }

    /// First `(context, group)` among `contexts` violating support, if any.
    pub fn first_violation(&self, contexts: &[usize]) -> Option<(usize, usize)> {
        contexts.iter().find_map(|&x| {
            self.weights[x]
                .iter()
                .position(Option::is_none)
                .map(|g| (x, g))
        })
    }
}
