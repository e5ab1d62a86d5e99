//! Off-policy evaluation for large discrete action spaces.
//!
//! The crate implements the OffCEM estimator, which splits the expected
//! reward into a cluster effect (handled by cluster importance weighting) and
//! a residual effect (handled by a regression model), alongside DM, IPS, DR,
//! MIPS and ablations. It also ships a synthetic environment, a two-step
//! regression pipeline, an exact enumeration oracle for small instances and a
//! sweep harness.

pub mod domain;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod numeric;
pub mod oracle;
pub mod regression;
pub mod seeds;
pub mod synthetic;
pub mod weights;

pub use domain::{
    is_locally_correct, policy_value, ActionCatalog, Clustering, ContextSet, LogRecord,
    LoggedDataset, Matrix, Policy, RewardModel, RewardNoise, RewardTable, TabularModel,
};
pub use error::{OffcemError, Result};
pub use weights::{
    cluster_marginal, cluster_weight, embedding_marginal, embedding_marginal_weight,
    vanilla_weight, Grouping, WeightTable,
};
