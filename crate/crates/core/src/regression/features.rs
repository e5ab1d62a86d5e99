//! Feature layouts: context features followed by one-hot blocks.

use crate::domain::{ActionCatalog, ContextSet};

/// Which one-hot blocks follow the context features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureLayout {
    /// `[x, onehot(a), onehot(φ(x,a))]`, used for f̂, q̂ and ĥ.
    ContextActionCluster,
    /// `[x, onehot(c)]`, used for the cluster baseline ĝ.
    ContextCluster,
}

impl FeatureLayout {
    /// Width of the one-hot block.
    pub fn sparse_dim(self, catalog: &ActionCatalog) -> usize {
        match self {
            FeatureLayout::ContextActionCluster => catalog.num_actions() + catalog.num_clusters(),
            FeatureLayout::ContextCluster => catalog.num_clusters(),
        }
    }

    /// Number of hot units per example.
    pub fn active(self) -> usize {
        match self {
            FeatureLayout::ContextActionCluster => 2,
            FeatureLayout::ContextCluster => 1,
        }
    }
}

/// Hot indices (relative to the one-hot block) for action `a` in context `x`.
#[inline]
pub fn action_hot(catalog: &ActionCatalog, x: usize, a: usize) -> [usize; 2] {
    [a, catalog.num_actions() + catalog.cluster_of(x, a)]
}

/// Full dense feature vector `[x, onehot(a), onehot(φ(x,a))]` of length
/// `d_x + |A| + |C|`.
pub fn featurize(contexts: &ContextSet, catalog: &ActionCatalog, x: usize, a: usize) -> Vec<f64> {
    let dx = contexts.dim();
    let mut v = vec![0.0; dx + FeatureLayout::ContextActionCluster.sparse_dim(catalog)];
    v[..dx].copy_from_slice(contexts.features(x));
    for h in action_hot(catalog, x, a) {
        v[dx + h] = 1.0;
    }
    v
}
