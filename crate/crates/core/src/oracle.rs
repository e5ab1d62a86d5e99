//! Exact ground truth for tiny instances.
//!
//! Every estimator here is a sample mean of i.i.d. per-record terms, so with a
//! fixed model its expectation and variance follow from enumerating all
//! `(x, a, r)` outcomes. The closed-form bias and variance expressions are
//! implemented separately so the two can be cross-checked.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{
    is_locally_correct, policy_value, ActionCatalog, Clustering, ContextSet, Matrix, Policy,
    RewardModel, RewardTable, TabularModel,
};
use crate::error::{OffcemError, Result};
use crate::estimators::{EstimatorKind, EstimatorSpec, TermEvaluator};
use crate::numeric::{pairwise_sum, safe_ratio};
use crate::seeds::{rng_for, Stream};
use crate::weights::{cluster_marginal, embedding_marginal};

/// Largest instance the oracle accepts.
pub const MAX_CONTEXTS: usize = 10;
pub const MAX_ACTIONS: usize = 20;

/// Tolerance used when checking local correctness on the grid.
pub const LOCAL_CORRECTNESS_TOL: f64 = 1e-9;

/// A small, fully specified problem with a fixed regression model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TinyInstance {
    pub contexts: ContextSet,
    pub catalog: ActionCatalog,
    pub rewards: RewardTable,
    pub logging: Policy,
    pub target: Policy,
    pub model: TabularModel,
}

impl TinyInstance {
    pub fn new(
        contexts: ContextSet,
        catalog: ActionCatalog,
        rewards: RewardTable,
        logging: Policy,
        target: Policy,
        model: TabularModel,
    ) -> Result<Self> {
        let inst = TinyInstance {
            contexts,
            catalog,
            rewards,
            logging,
            target,
            model,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        let (nx, na) = (self.contexts.len(), self.catalog.num_actions());
        if nx > MAX_CONTEXTS || na > MAX_ACTIONS {
            return Err(OffcemError::invalid(
                "tiny instance",
                format!("{nx} contexts × {na} actions exceeds {MAX_CONTEXTS} × {MAX_ACTIONS}"),
            ));
        }
        self.catalog.check_contexts(nx)?;
        self.logging.check_shape(nx, na)?;
        self.target.check_shape(nx, na)?;
        if self.rewards.num_contexts() != nx || self.rewards.num_actions() != na {
            return Err(OffcemError::Dimension {
                what: "instance reward table",
                expected: nx * na,
                got: self.rewards.num_contexts() * self.rewards.num_actions(),
            });
        }
        let m = self.model.values();
        if m.rows() != nx || m.cols() != na {
            return Err(OffcemError::Dimension {
                what: "instance model",
                expected: nx * na,
                got: m.rows() * m.cols(),
            });
        }
        Ok(())
    }

    /// Same instance with a different fixed model.
    pub fn with_model(&self, model: TabularModel) -> Result<Self> {
        let inst = TinyInstance { model, ..self.clone() };
        inst.validate()?;
        Ok(inst)
    }

    /// Same instance with a different catalog.
    pub fn with_catalog(&self, catalog: ActionCatalog) -> Result<Self> {
        let inst = TinyInstance { catalog, ..self.clone() };
        inst.validate()?;
        Ok(inst)
    }

    /// Same instance with a different target policy.
    pub fn with_target(&self, target: Policy) -> Result<Self> {
        let inst = TinyInstance { target, ..self.clone() };
        inst.validate()?;
        Ok(inst)
    }

    /// V(π) of the target policy.
    pub fn value(&self) -> Result<f64> {
        policy_value(&self.target, &self.rewards, &self.contexts)
    }

    /// Spec for `kind` using this instance's fixed model.
    pub fn spec(&self, kind: EstimatorKind) -> EstimatorSpec {
        let spec = EstimatorSpec::new(kind);
        if kind.needs_model() {
            spec.with_model(Arc::new(self.model.clone()))
        } else {
            spec
        }
    }

    /// True when the fixed model preserves within-cluster differences of q.
    pub fn model_is_locally_correct(&self) -> bool {
        is_locally_correct(&self.rewards, &self.model, &self.catalog, LOCAL_CORRECTNESS_TOL)
    }

    /// Single context, q = [4, 1, 3, 2], clusters [0, 0, 1, 1], uniform
    /// logging, target a point mass on action 0, noiseless rewards.
    pub fn four_action_example(model: &[f64; 4]) -> Result<Self> {
        TinyInstance::new(
            ContextSet::indicator(1)?,
            ActionCatalog::new(vec![0, 1, 2, 3], Clustering::Shared(vec![0, 0, 1, 1]))?,
            RewardTable::gaussian(Matrix::from_rows(vec![vec![4.0, 1.0, 3.0, 2.0]])?, 0.0)?,
            Policy::uniform(1, 4)?,
            Policy::deterministic(&[0], 4)?,
            TabularModel::from_rows(vec![model.to_vec()])?,
        )
    }
}

// ── Enumeration ─────────────────────────────────────────────────────────

/// Every outcome `(probability, term)` of one record.
fn outcomes(inst: &TinyInstance, spec: &EstimatorSpec) -> Result<Vec<(f64, f64)>> {
    inst.validate()?;
    if spec.model.as_ref().is_some_and(|m| m.is_data_dependent()) {
        return Err(OffcemError::NotEnumerable(format!(
            "estimator `{}` uses a data-dependent model",
            spec.kind
        )));
    }
    let all: Vec<usize> = (0..inst.contexts.len()).collect();
    let eval = TermEvaluator::new(spec, &inst.target, Some(&inst.logging), &inst.catalog, &all)?;
    let mut out = Vec::new();
    for x in 0..inst.contexts.len() {
        let px = inst.contexts.weight(x);
        if px == 0.0 {
            continue;
        }
        for a in 0..inst.catalog.num_actions() {
            let p0 = inst.logging.prob(x, a);
            if p0 == 0.0 {
                continue;
            }
            for (r, pr) in inst.rewards.support(x, a)? {
                if pr > 0.0 {
                    out.push((px * p0 * pr, eval.term(0, x, a, p0, r)?));
                }
            }
        }
    }
    Ok(out)
}

/// E_𝒟[V̂] by enumeration.
pub fn exact_mean(inst: &TinyInstance, spec: &EstimatorSpec) -> Result<f64> {
    let terms: Vec<f64> = outcomes(inst, spec)?.into_iter().map(|(p, t)| p * t).collect();
    Ok(pairwise_sum(&terms))
}

/// V_𝒟[V̂] for `n` records, by enumeration.
pub fn exact_variance(inst: &TinyInstance, spec: &EstimatorSpec, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(OffcemError::invalid("sample size", "n must be at least 1"));
    }
    let outs = outcomes(inst, spec)?;
    let m = pairwise_sum(&outs.iter().map(|(p, t)| p * t).collect::<Vec<_>>());
    let v = pairwise_sum(&outs.iter().map(|(p, t)| p * (t - m) * (t - m)).collect::<Vec<_>>());
    Ok(v / n as f64)
}

// ── Closed forms ────────────────────────────────────────────────────────

fn check_cluster_support(inst: &TinyInstance, x: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let pc = cluster_marginal(&inst.target, &inst.catalog, x)?;
    let p0c = cluster_marginal(&inst.logging, &inst.catalog, x)?;
    if let Some(c) = (0..pc.len()).find(|&c| pc[c] > 0.0 && p0c[c] == 0.0) {
        return Err(OffcemError::ClusterSupport { context: x, cluster: c });
    }
    Ok((pc, p0c))
}

fn check_action_support(inst: &TinyInstance, x: usize) -> Result<()> {
    match (0..inst.catalog.num_actions()).find(|&a| inst.target.prob(x, a) > 0.0 && inst.logging.prob(x, a) == 0.0) {
        Some(a) => Err(OffcemError::ActionSupport { context: x, action: a }),
        None => Ok(()),
    }
}

/// Bias of OffCEM with the instance's model:
/// E_{p(x)π(c|x)} Σ_{a<b: φ=c} π₀(a|x,c)π₀(b|x,c)(Δq − Δf̂)(a,b)
/// (π(b|x,c)/π₀(b|x,c) − π(a|x,c)/π₀(a|x,c)).
///
/// The bracket is evaluated as π₀(a|x,c)π(b|x,c) − π₀(b|x,c)π(a|x,c), which
/// equals the ratio form whenever it is defined and stays finite when some
/// actions in a supported cluster have zero logging probability.
pub fn bias_closed_form(inst: &TinyInstance) -> Result<f64> {
    inst.validate()?;
    let mut per_context = Vec::with_capacity(inst.contexts.len());
    for x in 0..inst.contexts.len() {
        let (pc, p0c) = check_cluster_support(inst, x)?;
        let mut cluster_terms = Vec::new();
        for (c, members) in inst.catalog.cluster_members(x).iter().enumerate() {
            if pc[c] == 0.0 {
                continue;
            }
            let mut pair_terms = Vec::new();
            for (i, &a) in members.iter().enumerate() {
                for &b in &members[i + 1..] {
                    let p0a = inst.logging.prob(x, a) / p0c[c];
                    let p0b = inst.logging.prob(x, b) / p0c[c];
                    let pa = inst.target.prob(x, a) / pc[c];
                    let pb = inst.target.prob(x, b) / pc[c];
                    let dq = inst.rewards.expected(x, a) - inst.rewards.expected(x, b);
                    let df = inst.model.predict(x, a) - inst.model.predict(x, b);
                    pair_terms.push((p0a * pb - p0b * pa) * (dq - df));
                }
            }
            cluster_terms.push(pc[c] * pairwise_sum(&pair_terms));
        }
        per_context.push(inst.contexts.weight(x) * pairwise_sum(&cluster_terms));
    }
    Ok(pairwise_sum(&per_context))
}

/// (1/n){E[w² σ²] + E_x[V_{π₀}(w Δ)] + V_x[E_π q]} for per-record weights
/// `weight(x, a)` and Δ = q − model.
fn dr_style_variance(inst: &TinyInstance, model: &dyn RewardModel, n: usize, weight: impl Fn(usize, usize) -> f64) -> Result<f64> {
    if n == 0 {
        return Err(OffcemError::invalid("sample size", "n must be at least 1"));
    }
    let nx = inst.contexts.len();
    let na = inst.catalog.num_actions();
    let mut noise = Vec::with_capacity(nx);
    let mut spread = Vec::with_capacity(nx);
    let mut values = Vec::with_capacity(nx);
    for x in 0..nx {
        let px = inst.contexts.weight(x);
        let mut n_terms = Vec::new();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for a in 0..na {
            let p0 = inst.logging.prob(x, a);
            if p0 == 0.0 {
                continue;
            }
            let w = weight(x, a);
            let d = w * (inst.rewards.expected(x, a) - model.predict(x, a));
            n_terms.push(p0 * w * w * inst.rewards.variance(x, a));
            first.push(p0 * d);
            second.push(p0 * d * d);
        }
        let m = pairwise_sum(&first);
        noise.push(px * pairwise_sum(&n_terms));
        spread.push(px * (pairwise_sum(&second) - m * m));
        let qpi: Vec<f64> = (0..na).map(|a| inst.target.prob(x, a) * inst.rewards.expected(x, a)).collect();
        values.push(pairwise_sum(&qpi));
    }
    let v_mean = pairwise_sum(&(0..nx).map(|x| inst.contexts.weight(x) * values[x]).collect::<Vec<_>>());
    let v_var = pairwise_sum(
        &(0..nx)
            .map(|x| inst.contexts.weight(x) * (values[x] - v_mean) * (values[x] - v_mean))
            .collect::<Vec<_>>(),
    );
    Ok((pairwise_sum(&noise) + pairwise_sum(&spread) + v_var) / n as f64)
}

/// Variance of OffCEM for a locally correct model.
pub fn variance_closed_form_offcem(inst: &TinyInstance, n: usize) -> Result<f64> {
    inst.validate()?;
    if !inst.model_is_locally_correct() {
        return Err(OffcemError::Precondition(
            "the model is not locally correct on this instance".into(),
        ));
    }
    let mut weights = Vec::with_capacity(inst.contexts.len());
    for x in 0..inst.contexts.len() {
        let (pc, p0c) = check_cluster_support(inst, x)?;
        weights.push(
            pc.iter()
                .zip(&p0c)
                .map(|(p, q)| safe_ratio(*p, *q).unwrap_or(0.0))
                .collect::<Vec<_>>(),
        );
    }
    let catalog = &inst.catalog;
    dr_style_variance(inst, &inst.model, n, |x, a| weights[x][catalog.cluster_of(x, a)])
}

/// Variance of DR with the instance's model, under common support.
pub fn variance_closed_form_dr(inst: &TinyInstance, n: usize) -> Result<f64> {
    inst.validate()?;
    for x in 0..inst.contexts.len() {
        check_action_support(inst, x)?;
    }
    dr_style_variance(inst, &inst.model, n, |x, a| inst.target.prob(x, a) / inst.logging.prob(x, a))
}

/// Variance of IPS: the DR expression with a zero model.
pub fn variance_closed_form_ips(inst: &TinyInstance, n: usize) -> Result<f64> {
    let zero = TabularModel::constant(inst.contexts.len(), inst.catalog.num_actions(), 0.0);
    variance_closed_form_dr(&inst.with_model(zero)?, n)
}

/// Variance reduction of MIPS over IPS:
/// (1/n) E_{p(x)π₀(e|x)}[E[r²|x,e] · V_{π₀(a|x,e)}[w(x,a)]].
pub fn mips_variance_reduction(inst: &TinyInstance, n: usize) -> Result<f64> {
    inst.validate()?;
    if n == 0 {
        return Err(OffcemError::invalid("sample size", "n must be at least 1"));
    }
    let mut per_context = Vec::with_capacity(inst.contexts.len());
    for x in 0..inst.contexts.len() {
        check_action_support(inst, x)?;
        let pe = embedding_marginal(&inst.target, &inst.catalog, x)?;
        let p0e = embedding_marginal(&inst.logging, &inst.catalog, x)?;
        if let Some(e) = (0..pe.len()).find(|&e| pe[e] > 0.0 && p0e[e] == 0.0) {
            return Err(OffcemError::EmbeddingSupport { context: x, embedding: e });
        }
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); inst.catalog.num_embeddings()];
        for a in 0..inst.catalog.num_actions() {
            groups[inst.catalog.embedding_of(a)].push(a);
        }
        let mut terms = Vec::new();
        for (e, members) in groups.iter().enumerate() {
            if p0e[e] == 0.0 {
                continue;
            }
            let cond = |a: usize| inst.logging.prob(x, a) / p0e[e];
            let w = |a: usize| safe_ratio(inst.target.prob(x, a), inst.logging.prob(x, a)).unwrap_or(0.0);
            let second_moment = pairwise_sum(&members.iter().map(|&a| cond(a) * inst.rewards.second_moment(x, a)).collect::<Vec<_>>());
            let w_mean = pairwise_sum(&members.iter().map(|&a| cond(a) * w(a)).collect::<Vec<_>>());
            let w_var = pairwise_sum(&members.iter().map(|&a| cond(a) * (w(a) - w_mean) * (w(a) - w_mean)).collect::<Vec<_>>());
            terms.push(p0e[e] * second_moment * w_var);
        }
        per_context.push(inst.contexts.weight(x) * pairwise_sum(&terms));
    }
    Ok(pairwise_sum(&per_context) / n as f64)
}

// ── Random instances ────────────────────────────────────────────────────

/// Reward family for generated instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OracleRewards {
    #[default]
    Bernoulli,
    Noiseless,
}

/// Shape limits for [`TinyInstance::random`].
#[derive(Debug, Clone, Copy)]
pub struct RandomInstanceOptions {
    pub max_contexts: usize,
    pub max_actions: usize,
    pub max_clusters: usize,
    pub rewards: OracleRewards,
    /// Zero out logging mass on some actions while keeping every cluster
    /// supported.
    pub unsupported_actions: bool,
}

impl Default for RandomInstanceOptions {
    fn default() -> Self {
        RandomInstanceOptions {
            max_contexts: 5,
            max_actions: 12,
            max_clusters: 4,
            rewards: OracleRewards::Bernoulli,
            unsupported_actions: false,
        }
    }
}

fn dense_random_ids<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..k).chain((k..n).map(|_| rng.random_range(0..k))).collect();
    ids.shuffle(rng);
    ids
}

fn random_row<R: Rng>(rng: &mut R, n: usize, zero_prob: f64) -> Vec<f64> {
    loop {
        let row: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < zero_prob { 0.0 } else { rng.random_range(0.05..1.0) })
            .collect();
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            return row.into_iter().map(|v| v / total).collect();
        }
    }
}

impl TinyInstance {
    /// A random instance in which rewards depend on actions only through
    /// their embeddings (either unique per action or shared), so embedding
    /// marginalization introduces no bias. Clusters are independent of the
    /// embeddings; the model is an arbitrary table.
    pub fn random(seed: u64, opts: &RandomInstanceOptions) -> Result<Self> {
        let mut rng = rng_for(seed, Stream::Environment);
        let nx = rng.random_range(1..=opts.max_contexts.clamp(1, MAX_CONTEXTS));
        let na = rng.random_range(2..=opts.max_actions.clamp(2, MAX_ACTIONS));
        let nc = rng.random_range(1..=opts.max_clusters.clamp(1, na));
        let ne = if rng.random::<bool>() { na } else { rng.random_range(1..=na) };

        let features = Matrix::from_fn(nx, 2, |_, _| rng.random_range(-1.0..1.0));
        let weights = random_row(&mut rng, nx, 0.0);
        let contexts = ContextSet::new(features, weights)?;
        let clusters = dense_random_ids(&mut rng, na, nc);
        let embeddings = dense_random_ids(&mut rng, na, ne);
        let catalog = ActionCatalog::new(embeddings.clone(), Clustering::Shared(clusters))?;

        let q_embed = Matrix::from_fn(nx, ne, |_, _| rng.random_range(0.0..1.0));
        let q = Matrix::from_fn(nx, na, |x, a| q_embed.get(x, embeddings[a]));
        let rewards = match opts.rewards {
            OracleRewards::Bernoulli => RewardTable::bernoulli(q)?,
            OracleRewards::Noiseless => RewardTable::gaussian(q, 0.0)?,
        };

        let mut blocked = vec![false; na];
        if opts.unsupported_actions {
            for members in catalog.cluster_members(0) {
                let keep = members[rng.random_range(0..members.len())];
                for a in members {
                    if a != keep && rng.random::<f64>() < 0.4 {
                        blocked[a] = true;
                    }
                }
            }
        }
        let mut logging = Matrix::zeros(nx, na);
        for x in 0..nx {
            let mut row = random_row(&mut rng, na, 0.0);
            row.iter_mut().zip(&blocked).filter(|(_, b)| **b).for_each(|(p, _)| *p = 0.0);
            let total: f64 = row.iter().sum();
            logging.row_mut(x).copy_from_slice(&row.iter().map(|p| p / total).collect::<Vec<_>>());
        }
        let target_rows: Vec<Vec<f64>> = (0..nx).map(|_| random_row(&mut rng, na, 0.3)).collect();
        let model = Matrix::from_fn(nx, na, |_, _| rng.random_range(-1.0..1.0));

        TinyInstance::new(
            contexts,
            catalog,
            rewards,
            Policy::new(logging)?,
            Policy::from_rows(target_rows)?,
            TabularModel::new(model),
        )
    }

    /// The model q(x,a) + δ(x, φ(x,a)) for random cluster offsets δ, which is
    /// locally correct by construction.
    pub fn locally_correct_model(&self, seed: u64) -> TabularModel {
        let mut rng = rng_for(seed, Stream::Learner);
        let nc = self.catalog.num_clusters();
        let delta = Matrix::from_fn(self.contexts.len(), nc, |_, _| rng.random_range(-2.0..2.0));
        TabularModel::new(Matrix::from_fn(self.contexts.len(), self.catalog.num_actions(), |x, a| {
            self.rewards.expected(x, a) + delta.get(x, self.catalog.cluster_of(x, a))
        }))
    }
}
