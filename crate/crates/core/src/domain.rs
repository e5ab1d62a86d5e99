//! Domain types shared by every module: contexts, actions, policies,
//! reward tables, logged data and the reward-model interface.
//!
//! Everything here is immutable after construction and validated on the
//! way in, so downstream code can index without re-checking shapes.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{OffcemError, Result};
use crate::numeric::{pairwise_sum, STOCHASTIC_TOL};

// ── Matrix ──────────────────────────────────────────────────────────────

/// Dense row-major matrix of `f64`. Serializes as a list of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(OffcemError::Dimension {
                what: "matrix data",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n * cols);
        for row in &rows {
            if row.len() != cols {
                return Err(OffcemError::Dimension {
                    what: "matrix row",
                    expected: cols,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: n,
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for Matrix {
    type Error = OffcemError;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Matrix::from_rows(rows)
    }
}

impl From<Matrix> for Vec<Vec<f64>> {
    fn from(m: Matrix) -> Self {
        m.to_rows()
    }
}

// ── Contexts ────────────────────────────────────────────────────────────

/// Finite context space: one feature vector and one probability per context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ContextSetRaw")]
pub struct ContextSet {
    features: Matrix,
    weights: Vec<f64>,
}

#[derive(Deserialize)]
struct ContextSetRaw {
    features: Matrix,
    weights: Vec<f64>,
}

impl TryFrom<ContextSetRaw> for ContextSet {
    type Error = OffcemError;

    fn try_from(raw: ContextSetRaw) -> Result<Self> {
        ContextSet::new(raw.features, raw.weights)
    }
}

impl ContextSet {
    pub fn new(features: Matrix, weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(OffcemError::invalid("context set", "no contexts"));
        }
        if features.rows() != weights.len() {
            return Err(OffcemError::Dimension {
                what: "context features",
                expected: weights.len(),
                got: features.rows(),
            });
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(OffcemError::invalid(
                "context weights",
                format!("weight {w} is not a nonnegative number"),
            ));
        }
        let total = pairwise_sum(&weights);
        if (total - 1.0).abs() > STOCHASTIC_TOL {
            return Err(OffcemError::invalid(
                "context weights",
                format!("weights sum to {total}, not 1"),
            ));
        }
        Ok(ContextSet { features, weights })
    }

    /// Uniform `p(x)` over the given feature rows.
    pub fn uniform(features: Matrix) -> Result<Self> {
        let n = features.rows();
        let w = if n == 0 { 0.0 } else { 1.0 / n as f64 };
        Self::new(features, vec![w; n])
    }

    /// Contexts without features of their own, encoded as indicator vectors.
    pub fn indicator(num_contexts: usize) -> Result<Self> {
        let features = Matrix::from_fn(num_contexts, num_contexts, |i, j| {
            if i == j {
                1.0
            } else {
                0.0
            }
        });
        Self::uniform(features)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self, x: usize) -> &[f64] {
        self.features.row(x)
    }

    pub fn feature_matrix(&self) -> &Matrix {
        &self.features
    }

    pub fn weight(&self, x: usize) -> f64 {
        self.weights[x]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

// ── Actions ─────────────────────────────────────────────────────────────

/// Cluster assignment φ. Either shared by all contexts or given per context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Clustering {
    Shared(Vec<usize>),
    PerContext(Vec<Vec<usize>>),
}

/// Action space with deterministic embeddings and a clustering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CatalogRaw", into = "CatalogRaw")]
pub struct ActionCatalog {
    num_actions: usize,
    num_clusters: usize,
    num_embeddings: usize,
    embedding_ids: Vec<usize>,
    embedding_vectors: Option<Vec<Vec<u32>>>,
    clustering: Clustering,
}

#[derive(Clone, Serialize, Deserialize)]
struct CatalogRaw {
    embedding_ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding_vectors: Option<Vec<Vec<u32>>>,
    clusters: Clustering,
}

impl TryFrom<CatalogRaw> for ActionCatalog {
    type Error = OffcemError;

    fn try_from(raw: CatalogRaw) -> Result<Self> {
        let mut cat = ActionCatalog::new(raw.embedding_ids, raw.clusters)?;
        if let Some(vectors) = raw.embedding_vectors {
            if vectors.len() != cat.num_actions {
                return Err(OffcemError::Dimension {
                    what: "embedding vectors",
                    expected: cat.num_actions,
                    got: vectors.len(),
                });
            }
            cat.embedding_vectors = Some(vectors);
        }
        Ok(cat)
    }
}

impl From<ActionCatalog> for CatalogRaw {
    fn from(c: ActionCatalog) -> Self {
        CatalogRaw {
            embedding_ids: c.embedding_ids,
            embedding_vectors: c.embedding_vectors,
            clusters: c.clustering,
        }
    }
}

fn dense_count(ids: impl Iterator<Item = usize>, what: &'static str) -> Result<usize> {
    let mut seen: Vec<bool> = Vec::new();
    for id in ids {
        if id >= seen.len() {
            seen.resize(id + 1, false);
        }
        seen[id] = true;
    }
    if let Some(gap) = seen.iter().position(|s| !s) {
        return Err(OffcemError::invalid(
            what,
            format!("ids are not dense: {gap} is unused"),
        ));
    }
    Ok(seen.len())
}

impl ActionCatalog {
    /// Builds a catalog from per-action embedding ids and a clustering.
    /// Both id families must be dense (every id below the maximum is used).
    pub fn new(embedding_ids: Vec<usize>, clustering: Clustering) -> Result<Self> {
        let num_actions = embedding_ids.len();
        if num_actions == 0 {
            return Err(OffcemError::invalid("action catalog", "no actions"));
        }
        let num_embeddings = dense_count(embedding_ids.iter().copied(), "embedding ids")?;
        let num_clusters = match &clustering {
            Clustering::Shared(c) => {
                if c.len() != num_actions {
                    return Err(OffcemError::Dimension {
                        what: "cluster assignment",
                        expected: num_actions,
                        got: c.len(),
                    });
                }
                dense_count(c.iter().copied(), "cluster ids")?
            }
            Clustering::PerContext(rows) => {
                if rows.is_empty() {
                    return Err(OffcemError::invalid("cluster assignment", "no context rows"));
                }
                for row in rows {
                    if row.len() != num_actions {
                        return Err(OffcemError::Dimension {
                            what: "cluster assignment row",
                            expected: num_actions,
                            got: row.len(),
                        });
                    }
                }
                dense_count(rows.iter().flatten().copied(), "cluster ids")?
            }
        };
        Ok(ActionCatalog {
            num_actions,
            num_clusters,
            num_embeddings,
            embedding_ids,
            embedding_vectors: None,
            clustering,
        })
    }

    /// Builds a catalog from categorical embedding vectors. Distinct vectors
    /// get dense ids in lexicographic order.
    pub fn from_embedding_vectors(vectors: Vec<Vec<u32>>, clustering: Clustering) -> Result<Self> {
        let mut distinct: BTreeMap<&[u32], usize> = BTreeMap::new();
        for v in &vectors {
            distinct.entry(v.as_slice()).or_insert(0);
        }
        for (i, id) in distinct.values_mut().enumerate() {
            *id = i;
        }
        let ids = vectors.iter().map(|v| distinct[v.as_slice()]).collect();
        let mut cat = Self::new(ids, clustering)?;
        cat.embedding_vectors = Some(vectors);
        Ok(cat)
    }

    /// Every action is its own cluster and has its own embedding.
    pub fn singletons(num_actions: usize) -> Result<Self> {
        let ids: Vec<usize> = (0..num_actions).collect();
        Self::new(ids.clone(), Clustering::Shared(ids))
    }

    /// Same actions, different shared clustering.
    pub fn with_clusters(&self, clusters: Vec<usize>) -> Result<Self> {
        let mut cat = Self::new(self.embedding_ids.clone(), Clustering::Shared(clusters))?;
        cat.embedding_vectors = self.embedding_vectors.clone();
        Ok(cat)
    }

    /// Same actions and clustering, different embedding ids.
    pub fn with_embedding_ids(&self, ids: Vec<usize>) -> Result<Self> {
        Self::new(ids, self.clustering.clone())
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    pub fn num_embeddings(&self) -> usize {
        self.num_embeddings
    }

    pub fn clustering(&self) -> &Clustering {
        &self.clustering
    }

    pub fn embedding_vector(&self, a: usize) -> Option<&[u32]> {
        self.embedding_vectors.as_ref().map(|v| v[a].as_slice())
    }

    #[inline]
    pub fn embedding_of(&self, a: usize) -> usize {
        self.embedding_ids[a]
    }

    pub fn embedding_ids(&self) -> &[usize] {
        &self.embedding_ids
    }

    /// φ(x, a).
    #[inline]
    pub fn cluster_of(&self, x: usize, a: usize) -> usize {
        match &self.clustering {
            Clustering::Shared(c) => c[a],
            Clustering::PerContext(rows) => rows[x][a],
        }
    }

    /// Number of contexts the clustering is defined for, if it is
    /// context-dependent.
    pub fn context_rows(&self) -> Option<usize> {
        match &self.clustering {
            Clustering::Shared(_) => None,
            Clustering::PerContext(rows) => Some(rows.len()),
        }
    }

    /// Checks that a context-dependent clustering covers `num_contexts`.
    pub fn check_contexts(&self, num_contexts: usize) -> Result<()> {
        match self.context_rows() {
            Some(rows) if rows != num_contexts => Err(OffcemError::Dimension {
                what: "per-context clustering",
                expected: num_contexts,
                got: rows,
            }),
            _ => Ok(()),
        }
    }

    /// Actions grouped by cluster in context `x`.
    pub fn cluster_members(&self, x: usize) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_clusters];
        for a in 0..self.num_actions {
            groups[self.cluster_of(x, a)].push(a);
        }
        groups
    }
}

// ── Policies ────────────────────────────────────────────────────────────

/// Tabular conditional distribution π(a|x).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix", into = "Matrix")]
pub struct Policy {
    probs: Matrix,
}

impl TryFrom<Matrix> for Policy {
    type Error = OffcemError;

    fn try_from(m: Matrix) -> Result<Self> {
        Policy::new(m)
    }
}

impl From<Policy> for Matrix {
    fn from(p: Policy) -> Self {
        p.probs
    }
}

impl Policy {
    pub fn new(probs: Matrix) -> Result<Self> {
        if probs.rows() == 0 || probs.cols() == 0 {
            return Err(OffcemError::invalid("policy", "empty probability table"));
        }
        for x in 0..probs.rows() {
            let row = probs.row(x);
            if let Some(p) = row.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(OffcemError::invalid(
                    "policy",
                    format!("probability {p} outside [0, 1] in context {x}"),
                ));
            }
            let total = pairwise_sum(row);
            if (total - 1.0).abs() > STOCHASTIC_TOL {
                return Err(OffcemError::invalid(
                    "policy",
                    format!("row {x} sums to {total}"),
                ));
            }
        }
        Ok(Policy { probs })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn uniform(num_contexts: usize, num_actions: usize) -> Result<Self> {
        Self::new(Matrix::filled(
            num_contexts,
            num_actions,
            1.0 / num_actions as f64,
        ))
    }

    /// Point mass on `actions[x]` in every context `x`.
    pub fn deterministic(actions: &[usize], num_actions: usize) -> Result<Self> {
        let mut m = Matrix::zeros(actions.len(), num_actions);
        for (x, &a) in actions.iter().enumerate() {
            if a >= num_actions {
                return Err(OffcemError::invalid("policy", format!("action {a} out of range")));
            }
            m.set(x, a, 1.0);
        }
        Self::new(m)
    }

    /// απ₁ + (1−α)π₂.
    pub fn mixture(&self, other: &Policy, alpha: f64) -> Result<Self> {
        self.check_shape(other.num_contexts(), other.num_actions())?;
        let data = self
            .probs
            .as_slice()
            .iter()
            .zip(other.probs.as_slice())
            .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
            .collect();
        Self::new(Matrix::from_vec(
            self.num_contexts(),
            self.num_actions(),
            data,
        )?)
    }

    pub fn num_contexts(&self) -> usize {
        self.probs.rows()
    }

    pub fn num_actions(&self) -> usize {
        self.probs.cols()
    }

    #[inline]
    pub fn prob(&self, x: usize, a: usize) -> f64 {
        self.probs.get(x, a)
    }

    pub fn row(&self, x: usize) -> &[f64] {
        self.probs.row(x)
    }

    pub fn table(&self) -> &Matrix {
        &self.probs
    }

    pub(crate) fn check_shape(&self, contexts: usize, actions: usize) -> Result<()> {
        if self.num_contexts() != contexts {
            return Err(OffcemError::Dimension {
                what: "policy contexts",
                expected: contexts,
                got: self.num_contexts(),
            });
        }
        if self.num_actions() != actions {
            return Err(OffcemError::Dimension {
                what: "policy actions",
                expected: actions,
                got: self.num_actions(),
            });
        }
        Ok(())
    }
}

// ── Rewards ─────────────────────────────────────────────────────────────

/// Conditional reward distribution around q(x,a).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RewardNoise {
    /// r ~ Normal(q, σ(x,a)²).
    Gaussian { sigma: Matrix },
    /// r ~ Bernoulli(q); requires q in [0, 1].
    Bernoulli,
}

/// Expected rewards q(x,a) plus the noise model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RewardTableRaw")]
pub struct RewardTable {
    q: Matrix,
    noise: RewardNoise,
}

#[derive(Deserialize)]
struct RewardTableRaw {
    q: Matrix,
    noise: RewardNoise,
}

impl TryFrom<RewardTableRaw> for RewardTable {
    type Error = OffcemError;

    fn try_from(raw: RewardTableRaw) -> Result<Self> {
        RewardTable::new(raw.q, raw.noise)
    }
}

impl RewardTable {
    pub fn new(q: Matrix, noise: RewardNoise) -> Result<Self> {
        if let Some(v) = q.as_slice().iter().find(|v| !v.is_finite()) {
            return Err(OffcemError::invalid("reward table", format!("non-finite q {v}")));
        }
        match &noise {
            RewardNoise::Gaussian { sigma } => {
                if sigma.rows() != q.rows() || sigma.cols() != q.cols() {
                    return Err(OffcemError::Dimension {
                        what: "reward noise",
                        expected: q.rows() * q.cols(),
                        got: sigma.rows() * sigma.cols(),
                    });
                }
                if let Some(s) = sigma.as_slice().iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
                    return Err(OffcemError::invalid("reward noise", format!("sigma {s} < 0")));
                }
            }
            RewardNoise::Bernoulli => {
                if let Some(v) = q.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(OffcemError::invalid(
                        "reward table",
                        format!("bernoulli mean {v} outside [0, 1]"),
                    ));
                }
            }
        }
        Ok(RewardTable { q, noise })
    }

    /// Gaussian rewards with one σ everywhere.
    pub fn gaussian(q: Matrix, sigma: f64) -> Result<Self> {
        let s = Matrix::filled(q.rows(), q.cols(), sigma);
        Self::new(q, RewardNoise::Gaussian { sigma: s })
    }

    pub fn bernoulli(q: Matrix) -> Result<Self> {
        Self::new(q, RewardNoise::Bernoulli)
    }

    pub fn num_contexts(&self) -> usize {
        self.q.rows()
    }

    pub fn num_actions(&self) -> usize {
        self.q.cols()
    }

    #[inline]
    pub fn expected(&self, x: usize, a: usize) -> f64 {
        self.q.get(x, a)
    }

    pub fn expected_table(&self) -> &Matrix {
        &self.q
    }

    pub fn noise(&self) -> &RewardNoise {
        &self.noise
    }

    pub fn is_noiseless(&self) -> bool {
        match &self.noise {
            RewardNoise::Gaussian { sigma } => sigma.as_slice().iter().all(|s| *s == 0.0),
            RewardNoise::Bernoulli => false,
        }
    }

    /// σ²(x,a) = V[r | x, a].
    pub fn variance(&self, x: usize, a: usize) -> f64 {
        match &self.noise {
            RewardNoise::Gaussian { sigma } => {
                let s = sigma.get(x, a);
                s * s
            }
            RewardNoise::Bernoulli => {
                let q = self.q.get(x, a);
                q * (1.0 - q)
            }
        }
    }

    /// E[r² | x, a].
    pub fn second_moment(&self, x: usize, a: usize) -> f64 {
        let q = self.q.get(x, a);
        self.variance(x, a) + q * q
    }

    /// Finite reward support as `(value, probability)` pairs.
    pub fn support(&self, x: usize, a: usize) -> Result<Vec<(f64, f64)>> {
        let q = self.q.get(x, a);
        match &self.noise {
            RewardNoise::Bernoulli => Ok(vec![(0.0, 1.0 - q), (1.0, q)]),
            RewardNoise::Gaussian { sigma } => {
                if sigma.get(x, a) == 0.0 {
                    Ok(vec![(q, 1.0)])
                } else {
                    Err(OffcemError::NotEnumerable(format!(
                        "gaussian reward with sigma {} at ({x}, {a})",
                        sigma.get(x, a)
                    )))
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, x: usize, a: usize, rng: &mut R) -> f64 {
        let q = self.q.get(x, a);
        match &self.noise {
            RewardNoise::Gaussian { sigma } => {
                let s = sigma.get(x, a);
                let z: f64 = StandardNormal.sample(rng);
                q + s * z
            }
            RewardNoise::Bernoulli => {
                if rng.random::<f64>() < q {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// V(π) = Σ_x p(x) Σ_a π(a|x) q(x,a), computed exactly.
pub fn policy_value(policy: &Policy, rewards: &RewardTable, contexts: &ContextSet) -> Result<f64> {
    policy.check_shape(contexts.len(), rewards.num_actions())?;
    if rewards.num_contexts() != contexts.len() {
        return Err(OffcemError::Dimension {
            what: "reward table contexts",
            expected: contexts.len(),
            got: rewards.num_contexts(),
        });
    }
    let per_context: Vec<f64> = (0..contexts.len())
        .map(|x| {
            let terms: Vec<f64> = policy
                .row(x)
                .iter()
                .zip(rewards.q.row(x))
                .map(|(p, q)| p * q)
                .collect();
            contexts.weight(x) * pairwise_sum(&terms)
        })
        .collect();
    Ok(pairwise_sum(&per_context))
}

// ── Logged data ─────────────────────────────────────────────────────────

/// One logged interaction. Field names double as the CSV header.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    #[serde(rename = "context_id")]
    pub context: usize,
    #[serde(rename = "action_id")]
    pub action: usize,
    #[serde(rename = "embedding_id")]
    pub embedding: usize,
    #[serde(rename = "cluster_id")]
    pub cluster: usize,
    pub propensity: f64,
    pub reward: f64,
}

/// Logged bandit feedback collected under a logging policy.
#[derive(Debug, Clone)]
pub struct LoggedDataset {
    records: Vec<LogRecord>,
    contexts: Arc<ContextSet>,
    catalog: Arc<ActionCatalog>,
}

impl LoggedDataset {
    pub fn new(
        records: Vec<LogRecord>,
        contexts: Arc<ContextSet>,
        catalog: Arc<ActionCatalog>,
    ) -> Result<Self> {
        catalog.check_contexts(contexts.len())?;
        for (i, r) in records.iter().enumerate() {
            if r.context >= contexts.len() || r.action >= catalog.num_actions() {
                return Err(OffcemError::invalid(
                    "logged record",
                    format!("record {i} references ({}, {}) out of range", r.context, r.action),
                ));
            }
            if !(r.propensity > 0.0 && r.propensity <= 1.0) {
                return Err(OffcemError::invalid(
                    "logged record",
                    format!("record {i} has propensity {}", r.propensity),
                ));
            }
            if !r.reward.is_finite() {
                return Err(OffcemError::invalid(
                    "logged record",
                    format!("record {i} has non-finite reward"),
                ));
            }
            if r.cluster != catalog.cluster_of(r.context, r.action) {
                return Err(OffcemError::invalid(
                    "logged record",
                    format!("record {i} cluster {} disagrees with catalog", r.cluster),
                ));
            }
            if r.embedding != catalog.embedding_of(r.action) {
                return Err(OffcemError::invalid(
                    "logged record",
                    format!("record {i} embedding {} disagrees with catalog", r.embedding),
                ));
            }
        }
        Ok(LoggedDataset {
            records,
            contexts,
            catalog,
        })
    }

    /// Fills embedding and cluster ids from the catalog.
    pub fn record(
        catalog: &ActionCatalog,
        context: usize,
        action: usize,
        propensity: f64,
        reward: f64,
    ) -> LogRecord {
        LogRecord {
            context,
            action,
            embedding: catalog.embedding_of(action),
            cluster: catalog.cluster_of(context, action),
            propensity,
            reward,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn contexts(&self) -> &Arc<ContextSet> {
        &self.contexts
    }

    pub fn catalog(&self) -> &Arc<ActionCatalog> {
        &self.catalog
    }

    /// Records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> LoggedDataset {
        LoggedDataset {
            records: indices.iter().map(|&i| self.records[i]).collect(),
            contexts: Arc::clone(&self.contexts),
            catalog: Arc::clone(&self.catalog),
        }
    }

    /// Same data with a different catalog (ids re-derived from it).
    pub fn with_catalog(&self, catalog: Arc<ActionCatalog>) -> Result<LoggedDataset> {
        let records = self
            .records
            .iter()
            .map(|r| Self::record(&catalog, r.context, r.action, r.propensity, r.reward))
            .collect();
        LoggedDataset::new(records, Arc::clone(&self.contexts), catalog)
    }

    /// Distinct context ids present in the data, ascending.
    pub fn observed_contexts(&self) -> Vec<usize> {
        let mut seen = vec![false; self.contexts.len()];
        for r in &self.records {
            seen[r.context] = true;
        }
        (0..seen.len()).filter(|&x| seen[x]).collect()
    }
}

// ── Reward models ───────────────────────────────────────────────────────

/// A fitted (or given) regression model f̂(x, a).
pub trait RewardModel: Send + Sync {
    fn predict(&self, x: usize, a: usize) -> f64;

    /// Prediction used for the `index`-th logged record. Cross-fitted models
    /// answer from the model that did not see that record.
    fn predict_logged(&self, index: usize, x: usize, a: usize) -> f64 {
        let _ = index;
        self.predict(x, a)
    }

    /// True when predictions for logged records depend on which records the
    /// model was fitted on (as with cross-fitting).
    fn is_data_dependent(&self) -> bool {
        false
    }
}

/// Explicit table of predictions over contexts × actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TabularModel {
    values: Matrix,
}

impl TabularModel {
    pub fn new(values: Matrix) -> Self {
        TabularModel { values }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        Ok(Self::new(Matrix::from_rows(rows)?))
    }

    pub fn constant(num_contexts: usize, num_actions: usize, value: f64) -> Self {
        Self::new(Matrix::filled(num_contexts, num_actions, value))
    }

    /// Tabulates any model over the full grid.
    pub fn tabulate(model: &dyn RewardModel, num_contexts: usize, num_actions: usize) -> Self {
        Self::new(Matrix::from_fn(num_contexts, num_actions, |x, a| {
            model.predict(x, a)
        }))
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }
}

impl RewardModel for TabularModel {
    fn predict(&self, x: usize, a: usize) -> f64 {
        self.values.get(x, a)
    }
}

impl<M: RewardModel + ?Sized> RewardModel for Arc<M> {
    fn predict(&self, x: usize, a: usize) -> f64 {
        (**self).predict(x, a)
    }

    fn predict_logged(&self, index: usize, x: usize, a: usize) -> f64 {
        (**self).predict_logged(index, x, a)
    }

    fn is_data_dependent(&self) -> bool {
        (**self).is_data_dependent()
    }
}

/// Local correctness check: within every cluster of every context, the
/// model reproduces q's pairwise differences within `tol`.
pub fn is_locally_correct(
    rewards: &RewardTable,
    model: &dyn RewardModel,
    catalog: &ActionCatalog,
    tol: f64,
) -> bool {
    (0..rewards.num_contexts()).all(|x| {
        catalog.cluster_members(x).iter().all(|members| {
            members.windows(2).all(|w| {
                let (a, b) = (w[0], w[1]);
                let dq = rewards.expected(x, a) - rewards.expected(x, b);
                let df = model.predict(x, a) - model.predict(x, b);
                (dq - df).abs() <= tol
            })
        })
    })
}
