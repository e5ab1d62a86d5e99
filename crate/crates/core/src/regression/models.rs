//! Fitted reward models and the fitting procedures that produce them.

use std::sync::Arc;

use crate::domain::{ActionCatalog, ContextSet, LoggedDataset, Matrix, RewardModel};
use crate::error::{OffcemError, Result};
use crate::numeric::{mean, pairwise_sum};
use crate::seeds::{derive_seed, rng_for, Stream};

use super::features::{action_hot, FeatureLayout};
use super::mlp::{train, Input, Mlp};
use super::pairs::{build_capped_pair_dataset, PairDataset, PairMode};
use super::{BaselineFamily, LearnerConfig, Loss, TABULAR_RECORDS_PER_CELL};

// ── Network-backed model ────────────────────────────────────────────────

/// Output transformation applied to the raw network output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Identity,
    Logistic,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// log(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// A trained network evaluated on one of the feature layouts.
#[derive(Debug, Clone)]
pub struct NetModel {
    net: Mlp,
    layout: FeatureLayout,
    link: Link,
    contexts: Arc<ContextSet>,
    catalog: Arc<ActionCatalog>,
    training_loss: f64,
}

impl NetModel {
    fn raw(&self, x: usize, hot: &[usize]) -> f64 {
        self.net.predict(Input {
            dense: self.contexts.features(x),
            hot,
        })
    }

    fn linked(&self, z: f64) -> f64 {
        match self.link {
            Link::Identity => z,
            Link::Logistic => sigmoid(z),
        }
    }

    /// Prediction for a (context, cluster) input. Only meaningful for the
    /// context-cluster layout.
    pub fn predict_cluster(&self, x: usize, c: usize) -> f64 {
        debug_assert_eq!(self.layout, FeatureLayout::ContextCluster);
        self.linked(self.raw(x, &[c]))
    }

    /// Mean data loss over the training examples after the final update.
    pub fn training_loss(&self) -> f64 {
        self.training_loss
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn layout(&self) -> FeatureLayout {
        self.layout
    }
}

impl RewardModel for NetModel {
    fn predict(&self, x: usize, a: usize) -> f64 {
        match self.layout {
            FeatureLayout::ContextActionCluster => self.linked(self.raw(x, &action_hot(&self.catalog, x, a))),
            FeatureLayout::ContextCluster => self.linked(self.raw(x, &[self.catalog.cluster_of(x, a)])),
        }
    }
}

fn new_net(contexts: &ContextSet, catalog: &ActionCatalog, layout: FeatureLayout, cfg: &LearnerConfig, seed: u64) -> Mlp {
    let mut rng = rng_for(seed, Stream::Learner);
    Mlp::new(
        contexts.dim(),
        layout.sparse_dim(catalog),
        layout.active(),
        cfg.hidden_layers(),
        &mut rng,
    )
}

fn check_rewards_for_loss(data: &LoggedDataset, loss: Loss) -> Result<()> {
    if loss == Loss::CrossEntropy {
        if let Some(r) = data.records().iter().find(|r| !(0.0..=1.0).contains(&r.reward)) {
            return Err(OffcemError::invalid(
                "cross-entropy targets",
                format!("reward {} outside [0, 1]", r.reward),
            ));
        }
    }
    Ok(())
}

/// Pointwise regression of `targets[i]` on the inputs given by `hot_of(i)`.
fn fit_pointwise(
    data: &LoggedDataset,
    targets: &[f64],
    layout: FeatureLayout,
    cfg: &LearnerConfig,
    seed: u64,
    hot_of: impl Fn(usize) -> [usize; 2],
) -> Result<NetModel> {
    let contexts = Arc::clone(data.contexts());
    let catalog = Arc::clone(data.catalog());
    let mut net = new_net(&contexts, &catalog, layout, cfg, seed);
    let loss = cfg.loss;
    let init = mean(targets);
    net.set_output_bias(match loss {
        Loss::Squared => init,
        Loss::CrossEntropy => {
            let p = init.clamp(1e-6, 1.0 - 1e-6);
            (p / (1.0 - p)).ln()
        }
    });
    let records = data.records();
    let active = layout.active();
    let example_loss = |net: &Mlp, i: usize, trace: &mut super::mlp::Trace| -> (f64, f64) {
        let hot = hot_of(i);
        let input = Input {
            dense: contexts.features(records[i].context),
            hot: &hot[..active],
        };
        let z = net.forward(input, trace);
        let y = targets[i];
        match loss {
            Loss::Squared => ((z - y) * (z - y), 2.0 * (z - y)),
            Loss::CrossEntropy => (softplus(z) - y * z, sigmoid(z) - y),
        }
    };
    let mut rng = rng_for(seed, Stream::Learner);
    train(&mut net, records.len(), cfg.settings(), &mut rng, |net, i, scratch, grad, scale| {
        let (l, dl) = example_loss(net, i, &mut scratch.first);
        let hot = hot_of(i);
        let input = Input {
            dense: contexts.features(records[i].context),
            hot: &hot[..active],
        };
        net.backward(input, &mut scratch.first, dl * scale, grad);
        l
    })?;
    let mut trace = net.trace();
    let losses: Vec<f64> = (0..records.len()).map(|i| example_loss(&net, i, &mut trace).0).collect();
    Ok(NetModel {
        net,
        layout,
        link: match loss {
            Loss::Squared => Link::Identity,
            Loss::CrossEntropy => Link::Logistic,
        },
        contexts,
        catalog,
        training_loss: mean(&losses),
    })
}

/// One-step regression of the observed reward on `[x, onehot(a), onehot(c)]`.
pub fn fit_one_step(data: &LoggedDataset, cfg: &LearnerConfig) -> Result<NetModel> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(OffcemError::InsufficientData { needed: 1, available: 0 });
    }
    check_rewards_for_loss(data, cfg.loss)?;
    let targets: Vec<f64> = data.records().iter().map(|r| r.reward).collect();
    let catalog = Arc::clone(data.catalog());
    let records = data.records();
    fit_pointwise(
        data,
        &targets,
        FeatureLayout::ContextActionCluster,
        cfg,
        derive_seed(&[cfg.seed, 1]),
        |i| action_hot(&catalog, records[i].context, records[i].action),
    )
}

// ── Pairwise step ───────────────────────────────────────────────────────

fn require_squared(cfg: &LearnerConfig, step: &str) -> Result<()> {
    if cfg.loss != Loss::Squared {
        return Err(OffcemError::invalid(
            "learner config",
            format!("the {step} step supports squared loss only"),
        ));
    }
    Ok(())
}

/// Σ over pairs of (r_a − r_b − (ĥ(x,a) − ĥ(x,b)))².
pub fn pairwise_loss(model: &dyn RewardModel, pairs: &PairDataset) -> f64 {
    let terms: Vec<f64> = pairs
        .pairs
        .iter()
        .map(|p| {
            let e = (p.reward_a - p.reward_b) - (model.predict(p.context, p.action_a) - model.predict(p.context, p.action_b));
            e * e
        })
        .collect();
    pairwise_sum(&terms)
}

/// Fits ĥ by regressing within-pair reward differences on prediction
/// differences.
pub fn fit_pairwise(
    pairs: &PairDataset,
    contexts: &Arc<ContextSet>,
    catalog: &Arc<ActionCatalog>,
    cfg: &LearnerConfig,
) -> Result<NetModel> {
    cfg.validate()?;
    require_squared(cfg, "pairwise")?;
    if pairs.is_empty() {
        return Err(OffcemError::EmptyPairs);
    }
    let seed = derive_seed(&[cfg.seed, 2]);
    let layout = FeatureLayout::ContextActionCluster;
    let mut net = new_net(contexts, catalog, layout, cfg, seed);
    let mut rng = rng_for(seed, Stream::Learner);
    train(&mut net, pairs.len(), cfg.settings(), &mut rng, |net, i, scratch, grad, scale| {
        let p = &pairs.pairs[i];
        let dense = contexts.features(p.context);
        let hot_a = action_hot(catalog, p.context, p.action_a);
        let hot_b = action_hot(catalog, p.context, p.action_b);
        let ia = Input { dense, hot: &hot_a };
        let ib = Input { dense, hot: &hot_b };
        let fa = net.forward(ia, &mut scratch.first);
        let fb = net.forward(ib, &mut scratch.second);
        let err = (fa - fb) - (p.reward_a - p.reward_b);
        net.backward(ia, &mut scratch.first, 2.0 * err * scale, grad);
        net.backward(ib, &mut scratch.second, -2.0 * err * scale, grad);
        err * err
    })?;
    let mut model = NetModel {
        net,
        layout,
        link: Link::Identity,
        contexts: Arc::clone(contexts),
        catalog: Arc::clone(catalog),
        training_loss: f64::NAN,
    };
    model.training_loss = pairwise_loss(&model, pairs) / pairs.len() as f64;
    Ok(model)
}

// ── Baseline step ───────────────────────────────────────────────────────

/// Cluster baseline ĝ(x,c), stored as a |X| × |C| table.
#[derive(Debug, Clone)]
pub struct BaselineModel {
    table: Matrix,
    catalog: Arc<ActionCatalog>,
    family: BaselineFamily,
}

impl BaselineModel {
    pub fn value(&self, x: usize, c: usize) -> f64 {
        self.table.get(x, c)
    }

    pub fn table(&self) -> &Matrix {
        &self.table
    }

    /// The family actually used (never `Auto`).
    pub fn family(&self) -> BaselineFamily {
        self.family
    }
}

impl RewardModel for BaselineModel {
    fn predict(&self, x: usize, a: usize) -> f64 {
        self.table.get(x, self.catalog.cluster_of(x, a))
    }
}

fn tabular_baseline(data: &LoggedDataset, targets: &[f64]) -> Matrix {
    let nx = data.contexts().len();
    let nc = data.catalog().num_clusters();
    let mut cells: Vec<Vec<f64>> = vec![Vec::new(); nx * nc];
    let mut per_context: Vec<Vec<f64>> = vec![Vec::new(); nx];
    for (r, &t) in data.records().iter().zip(targets) {
        cells[r.context * nc + r.cluster].push(t);
        per_context[r.context].push(t);
    }
    let global = if targets.is_empty() { 0.0 } else { mean(targets) };
    Matrix::from_fn(nx, nc, |x, c| {
        let cell = &cells[x * nc + c];
        if !cell.is_empty() {
            mean(cell)
        } else if !per_context[x].is_empty() {
            mean(&per_context[x])
        } else {
            global
        }
    })
}

/// Fits ĝ(x,c) to the residuals r − ĥ(x,a).
pub fn fit_baseline(data: &LoggedDataset, h: &dyn RewardModel, cfg: &LearnerConfig) -> Result<BaselineModel> {
    cfg.validate()?;
    require_squared(cfg, "baseline")?;
    let catalog = Arc::clone(data.catalog());
    let nx = data.contexts().len();
    let nc = catalog.num_clusters();
    let records = data.records();
    let targets: Vec<f64> = records.iter().map(|r| r.reward - h.predict(r.context, r.action)).collect();
    let family = match cfg.baseline {
        BaselineFamily::Auto => {
            if records.len() as f64 >= TABULAR_RECORDS_PER_CELL * (nx * nc) as f64 {
                BaselineFamily::Tabular
            } else {
                BaselineFamily::Learned
            }
        }
        other => other,
    };
    let table = match family {
        BaselineFamily::Tabular | BaselineFamily::Auto => tabular_baseline(data, &targets),
        BaselineFamily::Learned => {
            if records.is_empty() {
                return Err(OffcemError::InsufficientData { needed: 1, available: 0 });
            }
            let net = fit_pointwise(
                data,
                &targets,
                FeatureLayout::ContextCluster,
                cfg,
                derive_seed(&[cfg.seed, 3]),
                |i| [records[i].cluster, 0],
            )?;
            Matrix::from_fn(nx, nc, |x, c| net.predict_cluster(x, c))
        }
    };
    Ok(BaselineModel { table, catalog, family })
}

// ── Tabulated models ────────────────────────────────────────────────────

/// A model tabulated over the full grid as ĝ(x,c) + ĥ(x,a). One-step models
/// have a zero baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct GridModel {
    baseline: Matrix,
    residual: Matrix,
    catalog: Arc<ActionCatalog>,
}

impl GridModel {
    pub fn new(baseline: Matrix, residual: Matrix, catalog: Arc<ActionCatalog>) -> Result<Self> {
        if baseline.cols() != catalog.num_clusters() || residual.cols() != catalog.num_actions() {
            return Err(OffcemError::Dimension {
                what: "grid model columns",
                expected: catalog.num_clusters() + catalog.num_actions(),
                got: baseline.cols() + residual.cols(),
            });
        }
        if baseline.rows() != residual.rows() {
            return Err(OffcemError::Dimension {
                what: "grid model rows",
                expected: residual.rows(),
                got: baseline.rows(),
            });
        }
        catalog.check_contexts(residual.rows())?;
        Ok(GridModel { baseline, residual, catalog })
    }

    /// Tabulates `model` as a residual with zero baseline.
    pub fn from_model(model: &dyn RewardModel, num_contexts: usize, catalog: Arc<ActionCatalog>) -> Self {
        let residual = Matrix::from_fn(num_contexts, catalog.num_actions(), |x, a| model.predict(x, a));
        GridModel {
            baseline: Matrix::zeros(num_contexts, catalog.num_clusters()),
            residual,
            catalog,
        }
    }

    pub fn baseline(&self, x: usize, c: usize) -> f64 {
        self.baseline.get(x, c)
    }

    pub fn residual(&self, x: usize, a: usize) -> f64 {
        self.residual.get(x, a)
    }

    pub fn num_contexts(&self) -> usize {
        self.residual.rows()
    }

    /// Elementwise mean of several grids over the same catalog.
    pub fn average(models: &[GridModel]) -> Result<GridModel> {
        let first = models
            .first()
            .ok_or_else(|| OffcemError::invalid("grid average", "no models"))?;
        let avg = |pick: &dyn Fn(&GridModel) -> &Matrix| {
            let m0 = pick(first);
            Matrix::from_fn(m0.rows(), m0.cols(), |i, j| {
                let vals: Vec<f64> = models.iter().map(|m| pick(m).get(i, j)).collect();
                mean(&vals)
            })
        };
        Ok(GridModel {
            baseline: avg(&|m| &m.baseline),
            residual: avg(&|m| &m.residual),
            catalog: Arc::clone(&first.catalog),
        })
    }
}

impl RewardModel for GridModel {
    fn predict(&self, x: usize, a: usize) -> f64 {
        self.baseline.get(x, self.catalog.cluster_of(x, a)) + self.residual.get(x, a)
    }
}

// ── Two-step procedure ──────────────────────────────────────────────────

/// Result of [`two_step_fit`].
#[derive(Debug, Clone)]
pub struct TwoStepFit {
    pub model: GridModel,
    /// True when no qualifying pairs existed and one-step regression was used.
    pub fallback: bool,
    /// Pair mode used, when pairs were built.
    pub pair_mode: Option<PairMode>,
    pub num_pairs: usize,
    pub baseline_family: Option<BaselineFamily>,
}

/// Pairwise ĥ, then baseline ĝ on the residuals; f̂ = ĝ + ĥ. Falls back to
/// one-step regression when no pairs qualify.
pub fn two_step_fit(data: &LoggedDataset, cfg: &LearnerConfig) -> Result<TwoStepFit> {
    cfg.validate()?;
    let contexts = data.contexts();
    let catalog = data.catalog();
    let pairs = match build_capped_pair_dataset(
        data,
        cfg.pair_mode,
        Some(cfg.max_pairs_per_context),
        derive_seed(&[cfg.seed, 4]),
    ) {
        Ok(p) => p,
        Err(OffcemError::EmptyPairs) => {
            let one = fit_one_step(data, cfg)?;
            return Ok(TwoStepFit {
                model: GridModel::from_model(&one, contexts.len(), Arc::clone(catalog)),
                fallback: true,
                pair_mode: None,
                num_pairs: 0,
                baseline_family: None,
            });
        }
        Err(e) => return Err(e),
    };
    let squared = LearnerConfig {
        loss: Loss::Squared,
        ..cfg.clone()
    };
    let h = fit_pairwise(&pairs, contexts, catalog, &squared)?;
    let residual = Matrix::from_fn(contexts.len(), catalog.num_actions(), |x, a| h.predict(x, a));
    let h_table = crate::domain::TabularModel::new(residual.clone());
    let g = fit_baseline(data, &h_table, &squared)?;
    Ok(TwoStepFit {
        baseline_family: Some(g.family()),
        model: GridModel::new(g.table, residual, Arc::clone(catalog))?,
        fallback: false,
        pair_mode: Some(pairs.mode),
        num_pairs: pairs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Clustering, TabularModel};
    use crate::regression::{build_pair_dataset, ModelFamily};

    fn four_action_data(repeats: usize, contexts: usize) -> LoggedDataset {
        let ctx = Arc::new(ContextSet::indicator(contexts).unwrap());
        let cat = Arc::new(ActionCatalog::new(vec![0, 1, 2, 3], Clustering::Shared(vec![0, 0, 1, 1])).unwrap());
        let q = [4.0, 1.0, 3.0, 2.0];
        let mut recs = Vec::new();
        for k in 0..repeats {
            for a in 0..4 {
                recs.push(LoggedDataset::record(&cat, k % contexts, a, 0.25, q[a]));
            }
        }
        LoggedDataset::new(recs, ctx, cat).unwrap()
    }

    fn linear_cfg() -> LearnerConfig {
        LearnerConfig {
            family: ModelFamily::Linear,
            learning_rate: 0.05,
            epochs: 300,
            batch_size: 8,
            weight_decay: 0.0,
            ..LearnerConfig::default()
        }
    }

    #[test]
    fn pairwise_fit_recovers_within_cluster_differences() {
        let data = four_action_data(8, 1);
        let pairs = build_pair_dataset(&data, PairMode::SameCluster).unwrap();
        let h = fit_pairwise(&pairs, data.contexts(), data.catalog(), &linear_cfg()).unwrap();
        assert!((h.predict(0, 0) - h.predict(0, 1) - 3.0).abs() < 1e-3);
        assert!((h.predict(0, 2) - h.predict(0, 3) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn pairwise_loss_ignores_output_shift() {
        let data = four_action_data(3, 1);
        let pairs = build_pair_dataset(&data, PairMode::SameContext).unwrap();
        let mut h = fit_pairwise(&pairs, data.contexts(), data.catalog(), &LearnerConfig { epochs: 2, ..linear_cfg() }).unwrap();
        let before = pairwise_loss(&h, &pairs);
        h.network_mut().shift_output(17.25);
        // Differences cancel the shift; only the rounding of the shifted
        // outputs remains.
        let after = pairwise_loss(&h, &pairs);
        assert!((after - before).abs() <= 1e-12 * (1.0 + before), "{before} vs {after}");
    }

    #[test]
    fn single_equal_pair_has_zero_optimal_difference() {
        let ctx = Arc::new(ContextSet::indicator(1).unwrap());
        let cat = Arc::new(ActionCatalog::new(vec![0, 1], Clustering::Shared(vec![0, 0])).unwrap());
        let recs = vec![
            LoggedDataset::record(&cat, 0, 0, 0.5, 2.0),
            LoggedDataset::record(&cat, 0, 1, 0.5, 2.0),
        ];
        let data = LoggedDataset::new(recs, ctx, cat).unwrap();
        let pairs = build_pair_dataset(&data, PairMode::SameCluster).unwrap();
        let h = fit_pairwise(&pairs, data.contexts(), data.catalog(), &linear_cfg()).unwrap();
        assert!((h.predict(0, 0) - h.predict(0, 1)).abs() < 1e-6);
    }

    #[test]
    fn tabular_baseline_is_cell_mean_of_residuals() {
        let data = four_action_data(4, 2);
        let zero = TabularModel::constant(2, 4, 0.0);
        let cfg = LearnerConfig {
            baseline: BaselineFamily::Tabular,
            ..LearnerConfig::default()
        };
        let g = fit_baseline(&data, &zero, &cfg).unwrap();
        assert!((g.value(0, 0) - 2.5).abs() < 1e-9);
        assert!((g.value(1, 1) - 2.5).abs() < 1e-9);
        let exact = TabularModel::from_rows(vec![vec![4.0, 1.0, 3.0, 2.0]; 2]).unwrap();
        let g = fit_baseline(&data, &exact, &cfg).unwrap();
        assert!(g.table().as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn learned_baseline_is_deterministic() {
        let data = four_action_data(6, 2);
        let zero = TabularModel::constant(2, 4, 0.0);
        let cfg = LearnerConfig {
            baseline: BaselineFamily::Learned,
            hidden: vec![4],
            epochs: 3,
            ..LearnerConfig::default()
        };
        let a = fit_baseline(&data, &zero, &cfg).unwrap();
        let b = fit_baseline(&data, &zero, &cfg).unwrap();
        assert_eq!(a.table(), b.table());
        assert_eq!(a.family(), BaselineFamily::Learned);
    }

    #[test]
    fn two_step_model_decomposes() {
        let data = four_action_data(10, 1);
        let fit = two_step_fit(&data, &linear_cfg()).unwrap();
        assert!(!fit.fallback);
        let m = &fit.model;
        for a in 0..4 {
            let c = data.catalog().cluster_of(0, a);
            assert_eq!(m.predict(0, a), m.baseline(0, c) + m.residual(0, a));
        }
        assert!((m.predict(0, 0) - m.predict(0, 1) - 3.0).abs() < 1e-2);
        assert!((m.predict(0, 2) - m.predict(0, 3) - 1.0).abs() < 1e-2);
    }

    #[test]
    fn two_step_falls_back_without_pairs() {
        let ctx = Arc::new(ContextSet::indicator(3).unwrap());
        let cat = Arc::new(ActionCatalog::new(vec![0, 1, 2, 3], Clustering::Shared(vec![0, 0, 1, 1])).unwrap());
        let recs = (0..3).map(|x| LoggedDataset::record(&cat, x, x, 0.25, x as f64)).collect();
        let data = LoggedDataset::new(recs, ctx, cat.clone()).unwrap();
        let cfg = LearnerConfig { epochs: 5, hidden: vec![4], ..LearnerConfig::default() };
        let fit = two_step_fit(&data, &cfg).unwrap();
        assert!(fit.fallback);
        let one = fit_one_step(&data, &cfg).unwrap();
        assert_eq!(fit.model, GridModel::from_model(&one, 3, cat));
    }

    #[test]
    fn one_step_linear_recovers_linear_target() {
        let ctx = Arc::new(
            ContextSet::uniform(Matrix::from_fn(6, 2, |x, d| ((x * 3 + d * 5) % 7) as f64 / 3.0 - 1.0)).unwrap(),
        );
        let cat = Arc::new(ActionCatalog::new(vec![0, 1, 2], Clustering::Shared(vec![0, 0, 1])).unwrap());
        let mut recs = Vec::new();
        for x in 0..6 {
            for a in 0..3 {
                let f = ctx.features(x);
                let q = 1.0 + 0.5 * f[0] - 2.0 * f[1] + [0.3, -0.2, 0.7][a];
                recs.push(LoggedDataset::record(&cat, x, a, 1.0 / 3.0, q));
            }
        }
        let data = LoggedDataset::new(recs, ctx, cat).unwrap();
        let cfg = LearnerConfig {
            epochs: 2000,
            batch_size: 18,
            learning_rate: 0.02,
            ..linear_cfg()
        };
        let m = fit_one_step(&data, &cfg).unwrap();
        assert!(m.training_loss() < 1e-4, "loss {}", m.training_loss());
        let again = fit_one_step(&data, &cfg).unwrap();
        assert_eq!(m.predict(3, 1), again.predict(3, 1));
    }

    #[test]
    fn cross_entropy_requires_unit_rewards() {
        let data = four_action_data(2, 1);
        let cfg = LearnerConfig { loss: Loss::CrossEntropy, ..linear_cfg() };
        assert!(fit_one_step(&data, &cfg).is_err());
    }
}
