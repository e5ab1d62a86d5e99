//! Synthetic bandit environment with a known cluster/residual reward
//! decomposition, the softmax logging policy, the ε-greedy target policy and
//! logged-data sampling.

use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{
    ActionCatalog, Clustering, ContextSet, LoggedDataset, Matrix, Policy, RewardTable,
};
use crate::error::{OffcemError, Result};
use crate::numeric::{argmax, softmax};
use crate::seeds::{rng_for, Stream};

// ── Specification ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    #[default]
    Gaussian,
    Bernoulli,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvironmentSpec {
    pub num_contexts: usize,
    pub context_dim: usize,
    pub num_actions: usize,
    pub num_clusters: usize,
    pub embed_dims: usize,
    pub embed_cardinality: u32,
    pub reward_noise: f64,
    pub reward_mode: RewardMode,
    pub master_seed: u64,
}

impl Default for EnvironmentSpec {
    fn default() -> Self {
        EnvironmentSpec {
            num_contexts: 200,
            context_dim: 10,
            num_actions: 1000,
            num_clusters: 50,
            embed_dims: 10,
            embed_cardinality: 5,
            reward_noise: 3.0,
            reward_mode: RewardMode::Gaussian,
            master_seed: 12345,
        }
    }
}

impl EnvironmentSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_contexts", self.num_contexts),
            ("num_actions", self.num_actions),
            ("num_clusters", self.num_clusters),
            ("embed_dims", self.embed_dims),
            ("embed_cardinality", self.embed_cardinality as usize),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(OffcemError::invalid("environment spec", format!("{name} must be at least 1")));
        }
        if self.num_clusters > self.num_actions {
            return Err(OffcemError::invalid(
                "environment spec",
                format!(
                    "num_clusters {} exceeds num_actions {}",
                    self.num_clusters, self.num_actions
                ),
            ));
        }
        if !(self.reward_noise.is_finite() && self.reward_noise >= 0.0) {
            return Err(OffcemError::invalid("environment spec", "reward_noise must be >= 0"));
        }
        Ok(())
    }
}

// ── Environment ─────────────────────────────────────────────────────────

/// A generated world. `cluster_effect` is g(x,c) (|X| × |C|) and
/// `residual_effect` is h(x,a) (|X| × |A|); q(x,a) = g(x,φ(a)) + h(x,a).
#[derive(Debug, Clone)]
pub struct SyntheticEnvironment {
    pub spec: EnvironmentSpec,
    pub contexts: Arc<ContextSet>,
    pub catalog: Arc<ActionCatalog>,
    pub rewards: RewardTable,
    pub cluster_effect: Matrix,
    pub residual_effect: Matrix,
}

/// Inclusive 1-based feature ranges of the four threshold indicators, with
/// their comparison direction and threshold.
const THRESHOLDS: [(usize, usize, bool, f64); 4] = [
    (1, 3, false, 1.5),
    (3, 8, false, -0.5),
    (2, 3, true, 3.0),
    (5, 10, false, 1.0),
];

fn range_sum(x: &[f64], lo: usize, hi: usize) -> f64 {
    let hi = hi.min(x.len());
    if lo > hi {
        return 0.0;
    }
    x[lo - 1..hi].iter().sum()
}

fn uniform_vec<R: Rng>(rng: &mut R, len: usize, half_width: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-half_width..=half_width)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Splits actions into `num_clusters` contiguous groups after sorting by
/// embedding vector (ties by action id).
pub fn clusters_from_embeddings(vectors: &[Vec<u32>], num_clusters: usize) -> Vec<usize> {
    let n = vectors.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| vectors[a].cmp(&vectors[b]).then(a.cmp(&b)));
    let mut clusters = vec![0; n];
    for (rank, &a) in order.iter().enumerate() {
        clusters[a] = rank * num_clusters / n;
    }
    clusters
}

/// Builds the synthetic environment. Deterministic in `spec.master_seed`.
pub fn make_environment(spec: &EnvironmentSpec) -> Result<SyntheticEnvironment> {
    spec.validate()?;
    let mut rng = rng_for(spec.master_seed, Stream::Environment);
    let dx = spec.context_dim;
    let (nx, na, nc) = (spec.num_contexts, spec.num_actions, spec.num_clusters);

    let features = Matrix::from_fn(nx, dx, |_, _| rng.sample(StandardNormal));
    let vectors: Vec<Vec<u32>> = (0..na)
        .map(|_| {
            (0..spec.embed_dims)
                .map(|_| rng.random_range(0..spec.embed_cardinality))
                .collect()
        })
        .collect();
    let clusters = clusters_from_embeddings(&vectors, nc);
    let catalog = ActionCatalog::from_embedding_vectors(vectors, Clustering::Shared(clusters.clone()))?;

    let mut members = vec![Vec::new(); nc];
    for (a, &c) in clusters.iter().enumerate() {
        members[c].push(a);
    }

    // Cluster effect: quadratic polynomial per cluster plus shared threshold terms.
    let shifts = uniform_vec(&mut rng, 4, 3.0);
    let mut cluster_effect = Matrix::zeros(nx, nc);
    let mut residual_effect = Matrix::zeros(nx, na);
    for (c, acts) in members.iter().enumerate() {
        let quad = uniform_vec(&mut rng, dx * dx, 1.0);
        let lin = uniform_vec(&mut rng, dx, 1.0);
        let bias = rng.random_range(-1.0..=1.0);
        let theta_x = uniform_vec(&mut rng, dx, 1.0);
        let action_params: Vec<(Vec<f64>, f64)> = acts
            .iter()
            .map(|_| (uniform_vec(&mut rng, dx, 1.0), rng.random_range(-1.0..=1.0)))
            .collect();
        for x in 0..nx {
            let f = features.row(x);
            let mut g = bias + dot(&lin, f);
            for i in 0..dx {
                g += f[i] * dot(&quad[i * dx..(i + 1) * dx], f);
            }
            for (&(lo, hi, above, t), u) in THRESHOLDS.iter().zip(&shifts) {
                let s = range_sum(f, lo, hi);
                if (above && s > t) || (!above && s < t) {
                    g += u;
                }
            }
            cluster_effect.set(x, c, g);
            let ctx_term = dot(&theta_x, f);
            for (&a, (m_col, theta_a)) in acts.iter().zip(&action_params) {
                residual_effect.set(x, a, dot(m_col, f) + ctx_term + theta_a);
            }
        }
    }

    let contexts = ContextSet::uniform(features)?;
    let (rewards, cluster_effect, residual_effect) = match spec.reward_mode {
        RewardMode::Gaussian => {
            let q = Matrix::from_fn(nx, na, |x, a| {
                cluster_effect.get(x, clusters[a]) + residual_effect.get(x, a)
            });
            (RewardTable::gaussian(q, spec.reward_noise)?, cluster_effect, residual_effect)
        }
        RewardMode::Bernoulli => {
            // The latent sum is a logit; g is re-expressed on the probability
            // scale and h absorbs the remainder so q = g + h still holds.
            let q = Matrix::from_fn(nx, na, |x, a| {
                sigmoid(cluster_effect.get(x, clusters[a]) + residual_effect.get(x, a))
            });
            let g = Matrix::from_fn(nx, nc, |x, c| sigmoid(cluster_effect.get(x, c)));
            let h = Matrix::from_fn(nx, na, |x, a| q.get(x, a) - g.get(x, clusters[a]));
            (RewardTable::bernoulli(q)?, g, h)
        }
    };

    Ok(SyntheticEnvironment {
        spec: spec.clone(),
        contexts: Arc::new(contexts),
        catalog: Arc::new(catalog),
        rewards,
        cluster_effect,
        residual_effect,
    })
}

// ── Policies ────────────────────────────────────────────────────────────

/// π₀(a|x) ∝ exp(β q(x,a)).
pub fn softmax_logging(rewards: &RewardTable, beta: f64) -> Result<Policy> {
    let q = rewards.expected_table();
    let mut probs = Matrix::zeros(q.rows(), q.cols());
    for x in 0..q.rows() {
        probs.row_mut(x).copy_from_slice(&softmax(q.row(x), beta));
    }
    Policy::new(probs)
}

/// π(a|x) = (1−ε) 𝕀{a = argmax q(x,·)} + ε/|A|.
pub fn epsilon_target(rewards: &RewardTable, epsilon: f64) -> Result<Policy> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(OffcemError::invalid("epsilon", format!("{epsilon} outside [0, 1]")));
    }
    let q = rewards.expected_table();
    let na = q.cols();
    let mut probs = Matrix::filled(q.rows(), na, epsilon / na as f64);
    for x in 0..q.rows() {
        let best = argmax(q.row(x));
        let p = probs.get(x, best);
        probs.set(x, best, p + (1.0 - epsilon));
    }
    Policy::new(probs)
}

/// Zeroes the given actions in every row and renormalizes.
pub fn apply_unsupported(policy: &Policy, unsupported: &[usize]) -> Result<Policy> {
    if unsupported.is_empty() {
        return Ok(policy.clone());
    }
    let na = policy.num_actions();
    let mut blocked = vec![false; na];
    for &a in unsupported {
        if a >= na {
            return Err(OffcemError::invalid("unsupported action", format!("{a} out of range")));
        }
        blocked[a] = true;
    }
    let mut probs = policy.table().clone();
    for x in 0..probs.rows() {
        let row = probs.row_mut(x);
        for (a, p) in row.iter_mut().enumerate() {
            if blocked[a] {
                *p = 0.0;
            }
        }
        let total: f64 = row.iter().sum();
        if total <= 0.0 {
            return Err(OffcemError::DegeneratePolicy { context: x });
        }
        row.iter_mut().for_each(|p| *p /= total);
    }
    Policy::new(probs)
}

/// True when every cluster in every context keeps at least one action
/// outside `unsupported`.
pub fn clusters_keep_support(catalog: &ActionCatalog, unsupported: &[usize]) -> bool {
    let mut blocked = vec![false; catalog.num_actions()];
    for &a in unsupported {
        if a < blocked.len() {
            blocked[a] = true;
        }
    }
    let rows = catalog.context_rows().unwrap_or(1);
    (0..rows).all(|x| {
        catalog
            .cluster_members(x)
            .iter()
            .all(|m| m.iter().any(|&a| !blocked[a]))
    })
}

/// Draws `count` distinct actions to make unsupported, preferring picks that
/// leave every cluster with a supported action. Sorted ascending.
pub fn choose_unsupported(catalog: &ActionCatalog, count: usize, seed: u64) -> Result<Vec<usize>> {
    let na = catalog.num_actions();
    if count >= na {
        return Err(OffcemError::invalid(
            "unsupported action count",
            format!("{count} leaves no supported action among {na}"),
        ));
    }
    let mut rng = rng_for(seed, Stream::Unsupported);
    let mut order: Vec<usize> = (0..na).collect();
    order.shuffle(&mut rng);
    let mut remaining = vec![0usize; catalog.num_clusters()];
    for a in 0..na {
        remaining[catalog.cluster_of(0, a)] += 1;
    }
    let mut chosen = Vec::with_capacity(count);
    let mut skipped = Vec::new();
    for a in order {
        if chosen.len() == count {
            break;
        }
        let c = catalog.cluster_of(0, a);
        if remaining[c] > 1 {
            remaining[c] -= 1;
            chosen.push(a);
        } else {
            skipped.push(a);
        }
    }
    let missing = count - chosen.len();
    chosen.extend(skipped.into_iter().take(missing));
    chosen.sort_unstable();
    Ok(chosen)
}

// ── Sampling ────────────────────────────────────────────────────────────

/// Draws `n` i.i.d. records x ~ p(x), a ~ π₀(·|x), r ~ p(r|x,a).
pub fn sample_dataset(
    contexts: &Arc<ContextSet>,
    catalog: &Arc<ActionCatalog>,
    rewards: &RewardTable,
    pi0: &Policy,
    n: usize,
    seed: u64,
) -> Result<LoggedDataset> {
    if n == 0 {
        return Err(OffcemError::invalid("sample size", "n must be at least 1"));
    }
    pi0.check_shape(contexts.len(), catalog.num_actions())?;
    let context_dist = WeightedIndex::new(contexts.weights())
        .map_err(|e| OffcemError::invalid("context weights", e.to_string()))?;
    let action_dists = (0..pi0.num_contexts())
        .map(|x| {
            WeightedIndex::new(pi0.row(x))
                .map_err(|e| OffcemError::invalid("logging policy", e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut draw_rng = rng_for(seed, Stream::Logging);
    let pairs: Vec<(usize, usize)> = (0..n)
        .map(|_| {
            let x = context_dist.sample(&mut draw_rng);
            (x, action_dists[x].sample(&mut draw_rng))
        })
        .collect();
    let mut reward_rng = rng_for(seed, Stream::Rewards);
    let records = pairs
        .into_iter()
        .map(|(x, a)| {
            let r = rewards.sample(x, a, &mut reward_rng);
            LoggedDataset::record(catalog, x, a, pi0.prob(x, a), r)
        })
        .collect();
    LoggedDataset::new(records, Arc::clone(contexts), Arc::clone(catalog))
}

/// [`sample_dataset`] against a synthetic environment.
pub fn sample_logged_data(env: &SyntheticEnvironment, pi0: &Policy, n: usize, seed: u64) -> Result<LoggedDataset> {
    sample_dataset(&env.contexts, &env.catalog, &env.rewards, pi0, n, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> EnvironmentSpec {
        EnvironmentSpec {
            num_contexts: 6,
            context_dim: 4,
            num_actions: 12,
            num_clusters: 3,
            embed_dims: 3,
            embed_cardinality: 3,
            reward_noise: 1.0,
            reward_mode: RewardMode::Gaussian,
            master_seed: 9,
        }
    }

    fn row(values: &[f64]) -> RewardTable {
        RewardTable::gaussian(Matrix::from_rows(vec![values.to_vec()]).unwrap(), 0.0).unwrap()
    }

    #[test]
    fn noiseless_spec_gives_zero_sigma() {
        let env = make_environment(&EnvironmentSpec { reward_noise: 0.0, ..small_spec() }).unwrap();
        assert!(env.rewards.is_noiseless());
    }

    #[test]
    fn environment_is_deterministic() {
        let a = make_environment(&small_spec()).unwrap();
        let b = make_environment(&small_spec()).unwrap();
        assert_eq!(a.rewards, b.rewards);
        assert_eq!(a.catalog, b.catalog);
        assert_eq!(a.contexts, b.contexts);
        let c = make_environment(&EnvironmentSpec { master_seed: 10, ..small_spec() }).unwrap();
        assert_ne!(a.rewards, c.rewards);
    }

    #[test]
    fn reward_decomposes_into_cluster_and_residual() {
        for mode in [RewardMode::Gaussian, RewardMode::Bernoulli] {
            let env = make_environment(&EnvironmentSpec { reward_mode: mode, ..small_spec() }).unwrap();
            for x in 0..6 {
                for a in 0..12 {
                    let c = env.catalog.cluster_of(x, a);
                    let q = env.cluster_effect.get(x, c) + env.residual_effect.get(x, a);
                    assert!((q - env.rewards.expected(x, a)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn clusters_are_balanced_and_embedding_sorted() {
        let env = make_environment(&small_spec()).unwrap();
        let sizes: Vec<usize> = env.catalog.cluster_members(0).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 4]);
        let c = clusters_from_embeddings(&[vec![2], vec![0], vec![1], vec![0]], 2);
        assert_eq!(c, vec![1, 0, 1, 0]);
    }

    #[test]
    fn softmax_logging_examples() {
        let q = row(&[4.0, 1.0, 3.0, 2.0]);
        let uniform = softmax_logging(&q, 0.0).unwrap();
        assert!(uniform.row(0).iter().all(|p| (p - 0.25).abs() < 1e-15));
        let p = softmax_logging(&q, 1.0).unwrap();
        let z: f64 = [4.0f64, 1.0, 3.0, 2.0].iter().map(|v| v.exp()).sum();
        for (a, v) in [4.0f64, 1.0, 3.0, 2.0].iter().enumerate() {
            assert!((p.prob(0, a) - v.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn epsilon_target_examples() {
        let q = row(&[4.0, 1.0, 3.0, 2.0]);
        let pi = epsilon_target(&q, 0.2).unwrap();
        let expected = [0.85, 0.05, 0.05, 0.05];
        for a in 0..4 {
            assert!((pi.prob(0, a) - expected[a]).abs() < 1e-15);
        }
        assert_eq!(epsilon_target(&q, 0.0).unwrap().row(0), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(epsilon_target(&q, 1.0).unwrap().row(0), &[0.25; 4]);
        let tie = row(&[1.0, 5.0, 5.0]);
        assert_eq!(epsilon_target(&tie, 0.0).unwrap().row(0), &[0.0, 1.0, 0.0]);
        assert!(epsilon_target(&q, 1.5).is_err());
    }

    #[test]
    fn unsupported_examples() {
        let pi = Policy::uniform(1, 4).unwrap();
        assert_eq!(apply_unsupported(&pi, &[]).unwrap(), pi);
        let p = apply_unsupported(&pi, &[3]).unwrap();
        for a in 0..3 {
            assert!((p.prob(0, a) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(p.prob(0, 3), 0.0);
        assert_eq!(apply_unsupported(&pi, &[1, 2, 3]).unwrap().row(0), &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            apply_unsupported(&pi, &[0, 1, 2, 3]),
            Err(OffcemError::DegeneratePolicy { context: 0 })
        ));
    }

    #[test]
    fn chosen_unsupported_actions_keep_cluster_support() {
        let env = make_environment(&small_spec()).unwrap();
        let u = choose_unsupported(&env.catalog, 6, 3).unwrap();
        assert_eq!(u.len(), 6);
        assert!(clusters_keep_support(&env.catalog, &u));
        let all_but_clusters = choose_unsupported(&env.catalog, 9, 3).unwrap();
        assert!(clusters_keep_support(&env.catalog, &all_but_clusters));
        assert!(!clusters_keep_support(&env.catalog, &choose_unsupported(&env.catalog, 10, 3).unwrap()));
    }

    #[test]
    fn noiseless_sampling_returns_expected_rewards() {
        let env = make_environment(&EnvironmentSpec { reward_noise: 0.0, ..small_spec() }).unwrap();
        let pi0 = softmax_logging(&env.rewards, -0.1).unwrap();
        let data = sample_logged_data(&env, &pi0, 200, 1).unwrap();
        for r in data.records() {
            assert_eq!(r.reward, env.rewards.expected(r.context, r.action));
            assert_eq!(r.propensity, pi0.prob(r.context, r.action));
        }
        let again = sample_logged_data(&env, &pi0, 200, 1).unwrap();
        assert_eq!(data.records(), again.records());
    }

    #[test]
    fn uniform_logging_frequencies_converge() {
        let contexts = Arc::new(ContextSet::uniform(Matrix::zeros(1, 0)).unwrap());
        let catalog = Arc::new(ActionCatalog::singletons(4).unwrap());
        let rewards = RewardTable::gaussian(Matrix::zeros(1, 4), 1.0).unwrap();
        let pi0 = Policy::uniform(1, 4).unwrap();
        let data = sample_dataset(&contexts, &catalog, &rewards, &pi0, 100_000, 5).unwrap();
        let mut counts = [0usize; 4];
        for r in data.records() {
            counts[r.action] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1e5 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn unsupported_actions_never_logged() {
        let env = make_environment(&small_spec()).unwrap();
        let u = choose_unsupported(&env.catalog, 5, 2).unwrap();
        let pi0 = apply_unsupported(&softmax_logging(&env.rewards, -0.1).unwrap(), &u).unwrap();
        let data = sample_logged_data(&env, &pi0, 2000, 4).unwrap();
        assert!(data.records().iter().all(|r| !u.contains(&r.action)));
    }
}
