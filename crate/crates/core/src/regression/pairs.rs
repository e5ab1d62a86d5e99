//! Within-context record pairs for the pairwise (bias-minimization) step.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::domain::LoggedDataset;
use crate::error::{OffcemError, Result};
use crate::seeds::{rng_for, Stream};

/// Which record pairs qualify.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Same context and same cluster.
    SameCluster,
    /// Same context only.
    SameContext,
    /// Same cluster, relaxed to same context when that yields fewer pairs
    /// than there are clusters.
    #[default]
    Auto,
}

/// One pair of logged records sharing a context.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    pub context: usize,
    pub action_a: usize,
    pub action_b: usize,
    pub reward_a: f64,
    pub reward_b: f64,
    pub record_a: usize,
    pub record_b: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub pairs: Vec<Pair>,
    /// The mode actually used (never `Auto`).
    pub mode: PairMode,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn qualifying_pairs(data: &LoggedDataset, same_cluster: bool) -> Vec<Vec<Pair>> {
    let records = data.records();
    let mut by_context: Vec<Vec<usize>> = vec![Vec::new(); data.contexts().len()];
    for (i, r) in records.iter().enumerate() {
        by_context[r.context].push(i);
    }
    by_context
        .iter()
        .map(|members| {
            let mut out = Vec::new();
            for (k, &i) in members.iter().enumerate() {
                for &j in &members[k + 1..] {
                    let (ri, rj) = (&records[i], &records[j]);
                    if same_cluster && ri.cluster != rj.cluster {
                        continue;
                    }
                    out.push(Pair {
                        context: ri.context,
                        action_a: ri.action,
                        action_b: rj.action,
                        reward_a: ri.reward,
                        reward_b: rj.reward,
                        record_a: i,
                        record_b: j,
                    });
                }
            }
            out
        })
        .collect()
}

/// All unordered record pairs sharing a context (and a cluster, in
/// same-cluster mode), without a per-context cap.
pub fn build_pair_dataset(data: &LoggedDataset, mode: PairMode) -> Result<PairDataset> {
    build_capped_pair_dataset(data, mode, None, 0)
}

/// Like [`build_pair_dataset`], keeping at most `cap` pairs per context,
/// chosen uniformly at random with `seed`.
pub fn build_capped_pair_dataset(data: &LoggedDataset, mode: PairMode, cap: Option<usize>, seed: u64) -> Result<PairDataset> {
    let (groups, resolved) = match mode {
        PairMode::SameCluster => (qualifying_pairs(data, true), PairMode::SameCluster),
        PairMode::SameContext => (qualifying_pairs(data, false), PairMode::SameContext),
        PairMode::Auto => {
            let strict = qualifying_pairs(data, true);
            let total: usize = strict.iter().map(Vec::len).sum();
            if total < data.catalog().num_clusters() {
                (qualifying_pairs(data, false), PairMode::SameContext)
            } else {
                (strict, PairMode::SameCluster)
            }
        }
    };
    let mut rng = rng_for(seed, Stream::Pairs);
    let mut pairs = Vec::new();
    for group in groups {
        match cap {
            Some(cap) if group.len() > cap => {
                let mut keep = index::sample(&mut rng, group.len(), cap).into_vec();
                keep.sort_unstable();
                pairs.extend(keep.into_iter().map(|k| group[k]));
            }
            _ => pairs.extend(group),
        }
    }
    if pairs.is_empty() {
        return Err(OffcemError::EmptyPairs);
    }
    Ok(PairDataset {
        pairs,
        mode: resolved,
    })
}
