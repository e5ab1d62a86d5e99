//! CSV and JSON inputs of the `estimate` and `oracle` commands.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use offcem::{ActionCatalog, Clustering, LogRecord, Matrix, Policy, TabularModel};

fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    reader
        .deserialize()
        .enumerate()
        .map(|(i, row)| row.with_context(|| format!("{}: row {}", path.display(), i + 1)))
        .collect()
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(std::io::BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))
}

/// Logged records: `context_id,action_id,embedding_id,cluster_id,propensity,reward`.
pub fn read_records(path: &Path) -> Result<Vec<LogRecord>> {
    let records: Vec<LogRecord> = read_rows(path)?;
    if records.is_empty() {
        bail!("{}: no records", path.display());
    }
    Ok(records)
}

#[derive(Debug, Deserialize)]
struct PolicyRow {
    context_id: usize,
    action_id: usize,
    pi: f64,
    pi0: Option<f64>,
}

/// Target policy and, when the `pi0` column is filled, the logging policy.
pub struct PolicyPair {
    pub target: Policy,
    pub logging: Option<Policy>,
}

/// Policy file: `context_id,action_id,pi[,pi0]`. Missing pairs have
/// probability zero. Covers at least `min_contexts` contexts, more if the
/// file mentions higher context ids.
pub fn read_policies(path: &Path, min_contexts: usize, num_actions: usize) -> Result<PolicyPair> {
    let rows: Vec<PolicyRow> = read_rows(path)?;
    let num_contexts = rows.iter().map(|r| r.context_id + 1).max().unwrap_or(0).max(min_contexts);
    let mut pi = Matrix::zeros(num_contexts, num_actions);
    let mut pi0 = Matrix::zeros(num_contexts, num_actions);
    let mut has_pi0 = None;
    for (i, r) in rows.iter().enumerate() {
        if r.context_id >= num_contexts || r.action_id >= num_actions {
            bail!(
                "{}: row {} refers to ({}, {}) outside {num_contexts} contexts × {num_actions} actions",
                path.display(),
                i + 1,
                r.context_id,
                r.action_id
            );
        }
        if *has_pi0.get_or_insert(r.pi0.is_some()) != r.pi0.is_some() {
            bail!("{}: the pi0 column must be filled on every row or none", path.display());
        }
        pi.set(r.context_id, r.action_id, r.pi);
        if let Some(p) = r.pi0 {
            pi0.set(r.context_id, r.action_id, p);
        }
    }
    let target = Policy::new(pi).with_context(|| format!("{}: target policy", path.display()))?;
    let logging = match has_pi0 {
        Some(true) => Some(Policy::new(pi0).with_context(|| format!("{}: logging policy", path.display()))?),
        _ => None,
    };
    Ok(PolicyPair { target, logging })
}

#[derive(Debug, Deserialize)]
struct CatalogRow {
    context_id: Option<usize>,
    action_id: usize,
    embedding_id: usize,
    cluster_id: usize,
}

/// Catalog file: `[context_id,]action_id,embedding_id,cluster_id`. With a
/// context column the clustering is per context.
pub fn read_catalog(path: &Path) -> Result<ActionCatalog> {
    let rows: Vec<CatalogRow> = read_rows(path)?;
    if rows.is_empty() {
        bail!("{}: empty catalog", path.display());
    }
    let per_context = rows[0].context_id.is_some();
    let mut embeddings = BTreeMap::new();
    let mut clusters: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for r in &rows {
        if r.context_id.is_some() != per_context {
            bail!("{}: the context_id column must be filled on every row or none", path.display());
        }
        if let Some(&e) = embeddings.get(&r.action_id) {
            if e != r.embedding_id {
                bail!("{}: action {} has two embedding ids", path.display(), r.action_id);
            }
        }
        embeddings.insert(r.action_id, r.embedding_id);
        if clusters.insert((r.context_id.unwrap_or(0), r.action_id), r.cluster_id).is_some() {
            bail!("{}: duplicate row for action {}", path.display(), r.action_id);
        }
    }
    let num_actions = embeddings.len();
    if embeddings.keys().copied().ne(0..num_actions) {
        bail!("{}: action ids must be 0..{}", path.display(), num_actions);
    }
    let num_rows = clusters.keys().map(|(x, _)| x + 1).max().unwrap_or(1);
    let mut table = vec![vec![usize::MAX; num_actions]; num_rows];
    for ((x, a), c) in clusters {
        table[x][a] = c;
    }
    if table.iter().flatten().any(|&c| c == usize::MAX) {
        bail!("{}: every context needs a cluster for every action", path.display());
    }
    let clustering = if per_context {
        Clustering::PerContext(table)
    } else {
        Clustering::Shared(table.pop().expect("one row"))
    };
    ActionCatalog::new(embeddings.into_values().collect(), clustering).with_context(|| format!("{}: catalog", path.display()))
}

#[derive(Debug, Deserialize)]
struct ModelRow {
    context_id: usize,
    action_id: usize,
    prediction: f64,
}

/// Model file: `context_id,action_id,prediction`, one row per pair.
pub fn read_model(path: &Path, num_contexts: usize, num_actions: usize) -> Result<TabularModel> {
    let rows: Vec<ModelRow> = read_rows(path)?;
    let mut values = Matrix::filled(num_contexts, num_actions, f64::NAN);
    for r in rows {
        if r.context_id >= num_contexts || r.action_id >= num_actions {
            bail!("{}: ({}, {}) out of range", path.display(), r.context_id, r.action_id);
        }
        values.set(r.context_id, r.action_id, r.prediction);
    }
    if values.as_slice().iter().any(|v| v.is_nan()) {
        bail!("{}: a prediction is needed for every (context, action) pair", path.display());
    }
    Ok(TabularModel::new(values))
}
