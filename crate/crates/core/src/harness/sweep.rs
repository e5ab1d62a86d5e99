//! Running a sweep: environments, policies, replications and aggregation.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use crate::domain::{policy_value, LoggedDataset, Policy, RewardModel, TabularModel};
use crate::error::Result;
use crate::estimators::{estimate, EstimatorKind, EstimatorSpec};
use crate::regression::{cross_fit, fit_one_step, two_step_fit, GridModel, LearnerConfig};
use crate::seeds::{derive_seed, Stream};
use crate::synthetic::{
    apply_unsupported, choose_unsupported, clusters_keep_support, epsilon_target, make_environment,
    sample_logged_data, softmax_logging, SyntheticEnvironment,
};

use super::config::{ExperimentConfig, ModelSource};
use super::report::{ExperimentReport, ReportMetadata, ReportRow};

/// Everything fixed within one sweep cell.
#[derive(Debug, Clone)]
pub struct CellSetup {
    pub config: ExperimentConfig,
    pub environment: Arc<SyntheticEnvironment>,
    pub logging: Policy,
    pub target: Policy,
    pub unsupported: Vec<usize>,
    pub true_value: f64,
    pub warnings: Vec<String>,
}

/// Builds the environment and both policies for the cell at `value`.
/// `environment` is reused when given.
pub fn prepare_cell(cfg: &ExperimentConfig, value: f64, environment: Option<Arc<SyntheticEnvironment>>) -> Result<CellSetup> {
    let config = cfg.cell(value);
    let env = match environment {
        Some(env) => env,
        None => Arc::new(make_environment(&config.environment)?),
    };
    let mut warnings = Vec::new();
    let unsupported = if config.num_unsupported > 0 {
        let chosen = choose_unsupported(&env.catalog, config.num_unsupported, config.environment.master_seed)?;
        if !clusters_keep_support(&env.catalog, &chosen) {
            warnings.push(format!(
                "{} = {value}: some cluster has no supported action",
                cfg.sweep_axis.as_str()
            ));
        }
        chosen
    } else {
        Vec::new()
    };
    let logging = apply_unsupported(&softmax_logging(&env.rewards, config.beta)?, &unsupported)?;
    let target = epsilon_target(&env.rewards, config.epsilon)?;
    let true_value = policy_value(&target, &env.rewards, &env.contexts)?;
    Ok(CellSetup {
        config,
        environment: env,
        logging,
        target,
        unsupported,
        true_value,
        warnings,
    })
}

/// Seed of replication `rep` in the cell at `value`. Independent of the
/// other cells in the sweep.
pub fn replication_seed(master: u64, value: f64, rep: usize) -> u64 {
    derive_seed(&[master, value.to_bits(), rep as u64])
}

fn one_step_grid(data: &LoggedDataset, cfg: &LearnerConfig) -> Result<GridModel> {
    let m = fit_one_step(data, cfg)?;
    Ok(GridModel::from_model(&m, data.contexts().len(), Arc::clone(data.catalog())))
}

fn two_step_grid(data: &LoggedDataset, cfg: &LearnerConfig) -> Result<GridModel> {
    Ok(two_step_fit(data, cfg)?.model)
}

/// Fits with `fitter`, cross-fitted when the learner asks for it.
fn fit_model(
    data: &LoggedDataset,
    cfg: &LearnerConfig,
    fitter: fn(&LoggedDataset, &LearnerConfig) -> Result<GridModel>,
) -> Result<Arc<dyn RewardModel>> {
    if cfg.cross_fit_folds >= 2 {
        let m = cross_fit(data, cfg.cross_fit_folds, |f, d| {
            fitter(d, &cfg.with_seed(derive_seed(&[cfg.seed, f as u64])))
        })?;
        Ok(Arc::new(m))
    } else {
        Ok(Arc::new(fitter(data, cfg)?))
    }
}

/// The fitted model a sweep would use for `kind`: two-step regression for
/// OffCEM, one-step regression for the other model-based kinds, cross-fitted
/// when `cfg.cross_fit_folds >= 2`. `None` for kinds without a model.
pub fn fit_model_for(kind: EstimatorKind, data: &LoggedDataset, cfg: &LearnerConfig) -> Result<Option<Arc<dyn RewardModel>>> {
    match kind {
        k if !k.needs_model() => Ok(None),
        EstimatorKind::Offcem => fit_model(data, cfg, two_step_grid).map(Some),
        _ => fit_model(data, cfg, one_step_grid).map(Some),
    }
}

/// Estimates of every configured estimator on one replication, in
/// configuration order. Errors are kept as strings.
pub fn run_replication(cell: &CellSetup, rep: usize) -> Vec<std::result::Result<f64, String>> {
    let cfg = &cell.config;
    let value = cfg.cell_value();
    let seed = replication_seed(cfg.master_seed, value, rep);
    let data = match sample_logged_data(&cell.environment, &cell.logging, cfg.sample_size, seed) {
        Ok(d) => d,
        Err(e) => return vec![Err(e.to_string()); cfg.estimators.len()],
    };
    let learner = cfg.learner.with_seed(derive_seed(&[seed, Stream::Learner as u64]));
    let oracle: Arc<dyn RewardModel> = Arc::new(TabularModel::new(cell.environment.rewards.expected_table().clone()));

    let mut one_step: Option<std::result::Result<Arc<dyn RewardModel>, String>> = None;
    let mut two_step: Option<std::result::Result<Arc<dyn RewardModel>, String>> = None;
    cfg.estimators
        .iter()
        .map(|&kind| {
            let model = match (kind, cfg.model_source) {
                (k, _) if !k.needs_model() => None,
                (_, ModelSource::Oracle) => Some(Arc::clone(&oracle)),
                (EstimatorKind::Offcem, ModelSource::Fitted) => Some(
                    two_step
                        .get_or_insert_with(|| fit_model(&data, &learner, two_step_grid).map_err(|e| e.to_string()))
                        .clone()?,
                ),
                (_, ModelSource::Fitted) => Some(
                    one_step
                        .get_or_insert_with(|| fit_model(&data, &learner, one_step_grid).map_err(|e| e.to_string()))
                        .clone()?,
                ),
            };
            let mut spec = EstimatorSpec::new(kind);
            spec.model = model;
            estimate(&data, &cell.target, Some(&cell.logging), &spec).map_err(|e| e.to_string())
        })
        .collect()
}

/// Runs every cell and replication and aggregates the MSE decomposition.
/// Replications run in parallel; results are assembled in order, so the
/// report does not depend on the number of threads.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let start = Instant::now();
    let shared_env = if cfg.sweep_axis.changes_environment() {
        None
    } else {
        Some(Arc::new(make_environment(&cfg.environment)?))
    };
    let mut rows = Vec::with_capacity(cfg.sweep_values.len() * cfg.estimators.len());
    let mut warnings = Vec::new();
    for &value in &cfg.sweep_values {
        let cell = prepare_cell(cfg, value, shared_env.clone())?;
        warnings.extend(cell.warnings.iter().cloned());
        let results: Vec<Vec<_>> = (0..cfg.replications)
            .into_par_iter()
            .map(|rep| run_replication(&cell, rep))
            .collect();
        for (j, &kind) in cfg.estimators.iter().enumerate() {
            let column: Vec<_> = results.iter().map(|r| r[j].clone()).collect();
            rows.push(ReportRow::from_results(cfg.sweep_axis, value, kind, cell.true_value, &column));
        }
    }
    Ok(ExperimentReport {
        config: cfg.clone(),
        rows,
        metadata: ReportMetadata {
            config_hash: cfg.hash(),
            master_seed: cfg.master_seed,
            wall_time_secs: start.elapsed().as_secs_f64(),
            warnings,
        },
    })
}
