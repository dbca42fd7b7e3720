//! Hold-out evaluation: per-model RMSE over packed models, best-model
//! selection, and 2-D factor export for plotting.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ClientError, ParameterStore};
use crate::model::{
    init_vector, predict, FactorLookup, GlobalBias, HyperGrid, Hyperparameters, ModelError,
    ModelLayout,
};
use crate::store::{Edge, StoreError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("hold-out edge set is empty")]
    EmptyEdgeSet,
    #[error("all per-model RMSEs are NaN, nothing to select")]
    AllNaN,
    #[error("plot export needs k = 2, model has k = {0}")]
    WrongRank(usize),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("storage error: {0}")]
    Store(#[from] StoreError),
    #[error("parameter store error: {0}")]
    Client(#[from] ClientError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Batched read access to factor vectors during evaluation.
pub trait FactorSource {
    fn fetch(&mut self, ids: &[u64]) -> Result<HashMap<u64, Vec<f32>>, EvalError>;

    /// How many requested vectors had to be synthesized because they were
    /// never trained (always 0 for sources that lazily initialize).
    fn fallbacks(&self) -> u64 {
        0
    }
}

/// Evaluation source over anything addressable in process (a loaded export
/// file, a local V partition). Ids absent from the lookup are synthesized
/// from the initialization stream they would have received, so held-out
/// edges touching never-trained vertices evaluate against their
/// lazy-initialized vectors.
pub struct LookupSource<'a> {
    lookup: &'a dyn FactorLookup,
    layout: ModelLayout,
    init_seed: u64,
    init_stddev: f32,
    key_domain: u64,
    fallbacks: u64,
}

impl<'a> LookupSource<'a> {
    pub fn new(
        lookup: &'a dyn FactorLookup,
        layout: ModelLayout,
        init_seed: u64,
        init_stddev: f32,
        key_domain: u64,
    ) -> Self {
        LookupSource {
            lookup,
            layout,
            init_seed,
            init_stddev,
            key_domain,
            fallbacks: 0,
        }
    }
}

impl FactorSource for LookupSource<'_> {
    fn fetch(&mut self, ids: &[u64]) -> Result<HashMap<u64, Vec<f32>>, EvalError> {
        let mut out = HashMap::with_capacity(ids.len());
        for &id in ids {
            let vector = match self.lookup.vector(id) {
                Some(v) => v.to_vec(),
                None => {
                    self.fallbacks += 1;
                    let mut v = vec![0.0f32; self.layout.width()];
                    init_vector(
                        &mut v,
                        self.init_seed,
                        id ^ self.key_domain,
                        self.init_stddev,
                        &self.layout,
                    );
                    v
                }
            };
            out.insert(id, vector);
        }
        Ok(out)
    }

    fn fallbacks(&self) -> u64 {
        self.fallbacks
    }
}

/// Evaluation source backed by a live parameter store; unseen keys lazily
/// initialize server-side.
pub struct StoreSource<'a>(pub &'a mut dyn ParameterStore);

impl FactorSource for StoreSource<'_> {
    fn fetch(&mut self, ids: &[u64]) -> Result<HashMap<u64, Vec<f32>>, EvalError> {
        Ok(self.0.fetch_batch(ids)?)
    }
}

const EVAL_CHUNK: usize = 512;

/// Per-model root mean squared prediction error over a held-out edge set.
/// Errors are unweighted here; `w` enters training only. Accumulates in
/// f64.
pub fn holdout_rmse(
    edges: &[Edge],
    u: &mut dyn FactorSource,
    v: &mut dyn FactorSource,
    g: &GlobalBias,
    grid: &HyperGrid,
) -> Result<Vec<f64>, EvalError> {
    if edges.is_empty() {
        return Err(EvalError::EmptyEdgeSet);
    }
    let layout = grid.layout();
    let num_models = grid.num_models();
    let mut sq_sum = vec![0.0f64; num_models];
    for chunk in edges.chunks(EVAL_CHUNK) {
        let row_ids: Vec<u64> = dedupe(chunk.iter().map(|e| e.i));
        let col_ids: Vec<u64> = dedupe(chunk.iter().map(|e| e.j));
        let rows = u.fetch(&row_ids)?;
        let cols = v.fetch(&col_ids)?;
        for edge in chunk {
            let ui = &rows[&edge.i];
            let vj = &cols[&edge.j];
            for (p, sum) in sq_sum.iter_mut().enumerate() {
                let prediction = predict(ui, vj, g.get(p), &layout, p)?;
                let d = (prediction - edge.a) as f64;
                *sum += d * d;
            }
        }
    }
    let n = edges.len() as f64;
    Ok(sq_sum.into_iter().map(|s| (s / n).sqrt()).collect())
}

fn dedupe(ids: impl Iterator<Item = u64>) -> Vec<u64> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for id in ids {
        if seen.insert(id) {
            out.push(id);
        }
    }
    out
}

/// Picks the best model by validation RMSE: lowest value wins, ties break
/// toward the lower model index, NaN entries are skipped.
pub fn select_best(
    validation_rmse: &[f64],
    grid: &HyperGrid,
) -> Result<(usize, Hyperparameters), EvalError> {
    let mut best: Option<(usize, f64)> = None;
    for (index, &rmse) in validation_rmse.iter().enumerate() {
        if rmse.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| rmse < b) {
            best = Some((index, rmse));
        }
    }
    let (index, _) = best.ok_or(EvalError::AllNaN)?;
    Ok((index, grid.combos()[index]))
}

/// Writes `id<TAB>f1<TAB>f2` rows for the requested ids from the chosen
/// model slice (bias slot excluded). Only defined for k = 2 models.
pub fn export_plot_data(
    v: &mut dyn FactorSource,
    ids: &[u64],
    model_index: usize,
    grid: &HyperGrid,
    out_path: &Path,
) -> Result<(), EvalError> {
    if grid.k() != 2 {
        return Err(EvalError::WrongRank(grid.k()));
    }
    let layout = grid.layout();
    layout.check_model_index(model_index)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(out_path)?);
    for chunk in ids.chunks(EVAL_CHUNK) {
        let vectors = v.fetch(&dedupe(chunk.iter().copied()))?;
        for &id in chunk {
            let vector = &vectors[&id];
            let factors = &vector[layout.factor_range(model_index)];
            writeln!(out, "{id}\t{}\t{}", factors[0], factors[1])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Per-model entry of the RMSE report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelReport {
    pub model_index: usize,
    pub eta0: f32,
    pub lambda: f32,
    pub decay: f32,
    pub validation_rmse: Option<f64>,
    pub test_rmse: Option<f64>,
}

/// The JSON evaluation report: one entry per packed model plus split-level
/// accounting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RmseReport {
    pub split: String,
    pub edges: u64,
    pub positives: u64,
    pub negatives: u64,
    /// Held-out edges whose row/column vector was never trained and was
    /// backed by its lazy-initialized vector.
    pub lazy_u_vectors: u64,
    pub lazy_v_vectors: u64,
    pub best_model_index: Option<usize>,
    pub models: Vec<ModelReport>,
}

impl RmseReport {
    pub fn build(
        split: &str,
        edges: &[Edge],
        grid: &HyperGrid,
        rmse: &[f64],
        lazy_u: u64,
        lazy_v: u64,
    ) -> Self {
        let positives = edges.iter().filter(|e| e.a != 0.0).count() as u64;
        let models = grid
            .combos()
            .iter()
            .enumerate()
            .map(|(model_index, h)| {
                let value = Some(rmse[model_index]);
                ModelReport {
                    model_index,
                    eta0: h.eta0,
                    lambda: h.lambda,
                    decay: h.decay,
                    validation_rmse: if split == "validation" { value } else { None },
                    test_rmse: if split == "test" { value } else { None },
                }
            })
            .collect();
        RmseReport {
            split: split.to_string(),
            edges: edges.len() as u64,
            positives,
            negatives: edges.len() as u64 - positives,
            lazy_u_vectors: lazy_u,
            lazy_v_vectors: lazy_v,
            best_model_index: select_best(rmse, grid).ok().map(|(index, _)| index),
            models,
        }
    }
}
