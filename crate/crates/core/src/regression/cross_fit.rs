//! K-fold cross-fitting with folds assigned by record index modulo K.

use rayon::prelude::*;

use crate::domain::{LoggedDataset, RewardModel};
use crate::error::{OffcemError, Result};

use super::models::GridModel;

/// Fold of record `index` under K-fold cross-fitting.
#[inline]
pub fn fold_of(index: usize, k: usize) -> usize {
    index % k
}

/// Per-fold models plus their average. `folds[f]` was trained without the
/// records of fold `f`.
#[derive(Debug, Clone)]
pub struct CrossFitModel {
    folds: Vec<GridModel>,
    averaged: GridModel,
}

impl CrossFitModel {
    pub fn num_folds(&self) -> usize {
        self.folds.len()
    }

    pub fn fold_model(&self, f: usize) -> &GridModel {
        &self.folds[f]
    }

    pub fn averaged(&self) -> &GridModel {
        &self.averaged
    }
}

impl RewardModel for CrossFitModel {
    fn predict(&self, x: usize, a: usize) -> f64 {
        self.averaged.predict(x, a)
    }

    /// Answers from the model that did not see record `index`. Only
    /// meaningful for the dataset the model was cross-fitted on.
    fn predict_logged(&self, index: usize, x: usize, a: usize) -> f64 {
        self.folds[fold_of(index, self.folds.len())].predict(x, a)
    }

    fn is_data_dependent(&self) -> bool {
        true
    }
}

/// Trains `fitter(fold, training_data)` once per fold on the other K−1
/// folds. Folds are fitted in parallel; results do not depend on scheduling.
pub fn cross_fit<F>(data: &LoggedDataset, k: usize, fitter: F) -> Result<CrossFitModel>
where
    F: Fn(usize, &LoggedDataset) -> Result<GridModel> + Sync,
{
    if k < 2 {
        return Err(OffcemError::invalid("cross-fit folds", format!("K = {k}, need at least 2")));
    }
    if data.len() < k {
        return Err(OffcemError::InsufficientData {
            needed: k,
            available: data.len(),
        });
    }
    let folds = (0..k)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..data.len()).filter(|&i| fold_of(i, k) != f).collect();
            fitter(f, &data.subset(&train))
        })
        .collect::<Result<Vec<_>>>()?;
    let averaged = GridModel::average(&folds)?;
    Ok(CrossFitModel { folds, averaged })
}
