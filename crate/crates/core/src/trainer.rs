//! The learner: streams a column partition of edges, mixes in synthetic
//! negatives, and runs multi-threaded lock-free SGD — fetching row factor
//! vectors from the parameter store in batches and updating the co-located
//! V partition in place.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use crossbeam_channel::{bounded, Receiver};
use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ClientError, ClientTrafficLog, ParameterStore};
use crate::model::{
    init_vector, packed_sgd_step, EdgeContext, GlobalBias, HyperGrid, ModelError, ModelVariant,
    V_KEY_DOMAIN,
};
use crate::store::{
    save_factor_matrix, save_global_bias, Edge, EdgeFileReader, FactorMatrixPartition,
    GraphStats, HogwildPartition, StoreError,
};
use crate::util::mix64;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("storage error: {0}")]
    Store(#[from] StoreError),
    #[error("parameter store error: {0}")]
    Client(#[from] ClientError),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("pass {pass} aborted: {source}")]
    PassFailed {
        pass: usize,
        completed: Vec<PassReport>,
        source: Box<TrainError>,
    },
    #[error("non-finite training error at pass {pass} after {numeric_errors} numeric errors")]
    NonFinite { pass: usize, numeric_errors: u64 },
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

/// Reserved parameter-store key of model `p`'s global bias. The bias value
/// lives in slot 0 of the stored vector, which is a bias slot of every
/// layout and therefore lazily initializes to zero.
pub fn global_bias_key(model_index: usize) -> u64 {
    u64::MAX - model_index as u64
}

/// Configuration of one training run over one edge partition.
#[derive(Debug, Clone)]
pub struct TrainerConfig {
    pub partition_path: PathBuf,
    pub stats_path: PathBuf,
    pub grid: HyperGrid,
    pub passes: usize,
    pub threads: usize,
    /// Expected synthetic negatives per positive edge.
    pub negative_rate: f64,
    pub negative_weight: f32,
    /// Edges per worker block; also the unit of row-vector batching.
    pub fetch_batch_size: usize,
    /// Drives negative sampling and everything else that draws during
    /// training.
    pub seed: u64,
    /// Drives parameter initialization (local V here, U on the servers).
    pub init_seed: u64,
    pub init_stddev: f32,
    /// Every n-th training event feeds the sampled loss estimate.
    pub loss_sample_stride: usize,
}

impl TrainerConfig {
    pub fn new(partition_path: PathBuf, stats_path: PathBuf, grid: HyperGrid, seed: u64) -> Self {
        TrainerConfig {
            partition_path,
            stats_path,
            grid,
            passes: 1,
            threads: 1,
            negative_rate: 0.0,
            negative_weight: 1.0,
            fetch_batch_size: 512,
            seed,
            init_seed: seed,
            init_stddev: 0.01,
            loss_sample_stride: 97,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.passes < 1 {
            return Err(TrainError::Config("passes must be at least 1".into()));
        }
        if self.threads < 1 {
            return Err(TrainError::Config("threads must be at least 1".into()));
        }
        if !(self.negative_rate >= 0.0 && self.negative_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "negative_rate must be non-negative, got {}",
                self.negative_rate
            )));
        }
        if self.negative_weight.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(TrainError::Config(format!(
                "negative_weight must be positive, got {}",
                self.negative_weight
            )));
        }
        if self.fetch_batch_size < 1 {
            return Err(TrainError::Config("fetch_batch_size must be at least 1".into()));
        }
        if self.init_stddev.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(TrainError::Config(format!(
                "init_stddev must be positive, got {}",
                self.init_stddev
            )));
        }
        if self.loss_sample_stride < 1 {
            return Err(TrainError::Config("loss_sample_stride must be at least 1".into()));
        }
        Ok(())
    }
}

/// One pass worth of progress accounting. Serialized as one JSON object per
/// line; the wire fields are exactly pass, positives, negatives, mse,
/// loss_error_est, loss_reg_est, seconds, u_keys_fetched, v_keys_fetched.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PassReport {
    pub pass: usize,
    pub positives: u64,
    pub negatives: u64,
    pub mse: f64,
    pub loss_error_est: f64,
    pub loss_reg_est: f64,
    pub seconds: f64,
    pub u_keys_fetched: u64,
    pub v_keys_fetched: u64,
    #[serde(skip)]
    pub numeric_errors: u64,
    /// Merged traffic of all worker handles for this pass.
    #[serde(skip)]
    pub traffic: ClientTrafficLog,
}

/// Factory producing one parameter-store handle per worker per pass.
pub type ClientFactory<'a> =
    dyn Fn() -> Result<Box<dyn ParameterStore>, ClientError> + Sync + 'a;

#[derive(Debug)]
pub struct TrainOutcome {
    pub reports: Vec<PassReport>,
    pub local_v: FactorMatrixPartition,
}

/// Opens the edge stream of a partition. Re-open for each pass; the reader
/// holds only a fixed buffer regardless of file size.
pub fn stream_edges(path: &Path) -> Result<EdgeFileReader, StoreError> {
    EdgeFileReader::open(path)
}

/// Iterator adapter that follows every positive edge with `floor(rate)`
/// synthetic negatives, plus one more with probability `frac(rate)`. A
/// negative pairs a row drawn uniformly from the training row-id range with
/// a column drawn uniformly from the local partition, strength 0 and the
/// configured weight. Deterministic for a given seed.
pub struct NegativeMixer<I> {
    inner: I,
    whole: u64,
    frac: f64,
    weight: f32,
    columns: Arc<Vec<u64>>,
    row_range: (u64, u64),
    rng: ChaCha8Rng,
    pending: u64,
}

/// Wraps an edge stream with negative generation. Fails when negatives are
/// requested but no local columns exist to draw from.
pub fn mix_negatives<I>(
    edges: I,
    rate: f64,
    weight: f32,
    columns: Arc<Vec<u64>>,
    row_range: (u64, u64),
    seed: u64,
) -> Result<NegativeMixer<I>, TrainError>
where
    I: Iterator<Item = Result<Edge, StoreError>>,
{
    if rate > 0.0 && columns.is_empty() {
        return Err(TrainError::Config(
            "negative sampling needs a non-empty local column partition".into(),
        ));
    }
    if row_range.0 > row_range.1 {
        return Err(TrainError::Config("empty row id range".into()));
    }
    Ok(NegativeMixer {
        inner: edges,
        whole: rate.trunc() as u64,
        frac: rate.fract(),
        weight,
        columns,
        row_range,
        rng: ChaCha8Rng::seed_from_u64(seed),
        pending: 0,
    })
}

impl<I> Iterator for NegativeMixer<I>
where
    I: Iterator<Item = Result<Edge, StoreError>>,
{
    type Item = Result<Edge, StoreError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pending > 0 {
            self.pending -= 1;
            let i = self.rng.gen_range(self.row_range.0..=self.row_range.1);
            let j = self.columns[self.rng.gen_range(0..self.columns.len())];
            return Some(Ok(Edge::negative(i, j, self.weight)));
        }
        match self.inner.next()? {
            Ok(edge) => {
                // only positive observations breed negatives; a real
                // zero-strength edge passes through untouched
                if edge.a != 0.0 {
                    self.pending = self.whole;
                    if self.frac > 0.0 && self.rng.gen_bool(self.frac) {
                        self.pending += 1;
                    }
                }
                Some(Ok(edge))
            }
            Err(e) => Some(Err(e)),
        }
    }
}

/// Initializes a local V partition for a grid: per-vertex seeded Gaussian
/// factors, zero biases, and zeroed factor slots for reduced-complexity
/// variants so frozen parts contribute nothing to predictions.
pub fn init_partition(
    partition: &mut FactorMatrixPartition,
    grid: &HyperGrid,
    init_seed: u64,
    stddev: f32,
) {
    let layout = grid.layout();
    let ids: Vec<u64> = partition.ids().to_vec();
    for id in ids {
        let vector = partition
            .vector_of_mut(id)
            .expect("iterating the partition's own ids");
        init_vector(vector, init_seed, id ^ V_KEY_DOMAIN, stddev, &layout);
        for (p, combo) in grid.combos().iter().enumerate() {
            if combo.variant != ModelVariant::Full {
                for slot in layout.factor_range(p) {
                    vector[slot] = 0.0;
                }
            }
        }
    }
}

struct WorkerTally {
    positives: u64,
    negatives: u64,
    numeric_errors: u64,
    events_ok: u64,
    sq_err_sum: f64,
    sampled_events: u64,
    sampled_half_w_sq: Vec<f64>,
    sampled_u: Vec<Vec<f32>>,
    last_g: Vec<f32>,
    u_keys_fetched: u64,
    g_keys_fetched: u64,
    traffic: ClientTrafficLog,
}

impl WorkerTally {
    fn new(num_models: usize) -> Self {
        WorkerTally {
            positives: 0,
            negatives: 0,
            numeric_errors: 0,
            events_ok: 0,
            sq_err_sum: 0.0,
            sampled_events: 0,
            sampled_half_w_sq: vec![0.0; num_models],
            sampled_u: Vec::new(),
            last_g: vec![0.0; num_models],
            u_keys_fetched: 0,
            g_keys_fetched: 0,
            traffic: ClientTrafficLog::default(),
        }
    }
}

const U_SAMPLE_CAP: usize = 1024;

fn run_worker(
    rx: Receiver<Vec<Edge>>,
    mut store: Box<dyn ParameterStore>,
    local_v: HogwildPartition,
    stats: &GraphStats,
    grid: &HyperGrid,
    pass: usize,
    sample_stride: u64,
) -> Result<WorkerTally, TrainError> {
    let num_models = grid.num_models();
    let g_keys: Vec<u64> = (0..num_models).map(global_bias_key).collect();
    let mut errors = vec![0.0f32; num_models];
    let mut tally = WorkerTally::new(num_models);
    let mut event_idx = 0u64;

    while let Ok(block) = rx.recv() {
        // distinct row keys in block order, then the reserved g keys
        let mut keys: Vec<u64> = Vec::with_capacity(block.len() + num_models);
        let mut seen = HashSet::with_capacity(block.len());
        for edge in &block {
            if seen.insert(edge.i) {
                keys.push(edge.i);
            }
        }
        let distinct_rows = keys.len() as u64;
        keys.extend_from_slice(&g_keys);
        let mut fetched = store.fetch_batch(&keys)?;
        tally.u_keys_fetched += distinct_rows;
        tally.g_keys_fetched += num_models as u64;

        let mut g = GlobalBias::zeros(num_models);
        for (p, key) in g_keys.iter().enumerate() {
            g.set(p, fetched[key][0]);
        }

        for edge in &block {
            let u = fetched
                .get_mut(&edge.i)
                .ok_or_else(|| TrainError::Internal(format!("row {} not fetched", edge.i)))?;
            let v = local_v.vector_mut_racy(edge.j)?;
            let ctx = EdgeContext {
                strength: edge.a,
                weight: edge.w,
                out_degree: stats.out_degree_or_one(edge.i),
                in_degree: stats.in_degree_or_one(edge.j),
            };
            match packed_sgd_step(u, v, &mut g, &ctx, grid, pass, &mut errors) {
                Ok(()) => {
                    let mut event_sq = 0.0f64;
                    for &e in &errors {
                        event_sq += (e as f64) * (e as f64);
                    }
                    tally.sq_err_sum += event_sq;
                    tally.events_ok += 1;
                    if event_idx.is_multiple_of(sample_stride) {
                        tally.sampled_events += 1;
                        for (p, &e) in errors.iter().enumerate() {
                            tally.sampled_half_w_sq[p] +=
                                (e as f64) * (e as f64) / (2.0 * edge.w as f64);
                        }
                        if tally.sampled_u.len() < U_SAMPLE_CAP {
                            tally.sampled_u.push(u.clone());
                        }
                    }
                }
                Err(ModelError::NonFinite { .. }) => tally.numeric_errors += 1,
                Err(e) => return Err(e.into()),
            }
            if edge.synthetic_negative {
                tally.negatives += 1;
            } else {
                tally.positives += 1;
            }
            event_idx += 1;
        }

        for (p, key) in g_keys.iter().enumerate() {
            let vector = fetched
                .get_mut(key)
                .ok_or_else(|| TrainError::Internal("g key not fetched".into()))?;
            vector[0] = g.get(p);
        }
        tally.last_g.copy_from_slice(g.values());

        let entries: Vec<(u64, &[f32])> = keys
            .iter()
            .map(|key| (*key, fetched[key].as_slice()))
            .collect();
        store.write_batch(&entries)?;
    }

    tally.traffic = store.traffic();
    Ok(tally)
}

/// Runs the configured number of passes over the partition, dealing blocks
/// of edges (positives with negatives mixed in) to `threads` workers. Each
/// worker owns a parameter-store handle; V is shared lock-free. With one
/// thread the run is bitwise deterministic for a given configuration.
pub fn train(
    config: &TrainerConfig,
    mut local_v: FactorMatrixPartition,
    client_factory: &ClientFactory,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let stats = GraphStats::load(&config.stats_path)?;
    let grid = &config.grid;
    let num_models = grid.num_models();

    let g_floor = global_bias_key(num_models - 1);
    if let Some((_, max_row)) = stats.row_id_range() {
        if max_row >= g_floor {
            return Err(TrainError::Config(format!(
                "row id {max_row} collides with reserved global-bias keys"
            )));
        }
    }

    init_partition(&mut local_v, grid, config.init_seed, config.init_stddev);
    let columns: Arc<Vec<u64>> = Arc::new(local_v.ids().to_vec());
    let row_range = stats.row_id_range().unwrap_or((0, 0));
    let shared_v = HogwildPartition::new(local_v);

    let mut reports: Vec<PassReport> = Vec::with_capacity(config.passes);
    for pass in 0..config.passes {
        let started = Instant::now();
        match run_pass(config, &stats, &shared_v, &columns, row_range, pass, client_factory) {
            Ok(tallies) => {
                let report = summarize_pass(config, &stats, &shared_v, pass, &tallies, started);
                if !report.mse.is_finite() {
                    return Err(TrainError::NonFinite {
                        pass,
                        numeric_errors: report.numeric_errors,
                    });
                }
                info!(
                    "pass {pass}: {} positives, {} negatives, mse {:.6}",
                    report.positives, report.negatives, report.mse
                );
                reports.push(report);
            }
            Err(source) => {
                return Err(TrainError::PassFailed {
                    pass,
                    completed: reports,
                    source: Box::new(source),
                })
            }
        }
    }

    let local_v = shared_v
        .try_into_inner()
        .map_err(|_| TrainError::Internal("stray V partition handle after training".into()))?;
    Ok(TrainOutcome { reports, local_v })
}

fn run_pass(
    config: &TrainerConfig,
    stats: &GraphStats,
    shared_v: &HogwildPartition,
    columns: &Arc<Vec<u64>>,
    row_range: (u64, u64),
    pass: usize,
    client_factory: &ClientFactory,
) -> Result<Vec<WorkerTally>, TrainError> {
    let (tx, rx) = bounded::<Vec<Edge>>(config.threads * 2);
    let block_size = config.fetch_batch_size;
    let pass_seed = mix64(config.seed, pass as u64);

    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(config.threads);
        for _ in 0..config.threads {
            let rx = rx.clone();
            let store = client_factory()?;
            let v = shared_v.clone();
            handles.push(scope.spawn(move || {
                run_worker(
                    rx,
                    store,
                    v,
                    stats,
                    &config.grid,
                    pass,
                    config.loss_sample_stride as u64,
                )
            }));
        }
        drop(rx);

        let reader_result = (move || -> Result<(), TrainError> {
            let tx = tx; // owned here so it drops even on early error
            let reader = stream_edges(&config.partition_path)?;
            let mixer = mix_negatives(
                reader,
                config.negative_rate,
                config.negative_weight,
                Arc::clone(columns),
                row_range,
                pass_seed,
            )?;
            let mut block = Vec::with_capacity(block_size);
            for item in mixer {
                block.push(item?);
                if block.len() == block_size {
                    let full = std::mem::replace(&mut block, Vec::with_capacity(block_size));
                    if tx.send(full).is_err() {
                        break; // all workers gone; their error surfaces below
                    }
                }
            }
            if !block.is_empty() {
                let _ = tx.send(block);
            }
            Ok(())
        })();

        let mut tallies = Vec::with_capacity(handles.len());
        let mut worker_error = None;
        for handle in handles {
            match handle.join().expect("worker thread panicked") {
                Ok(tally) => tallies.push(tally),
                Err(e) => worker_error = Some(e),
            }
        }
        reader_result?;
        if let Some(e) = worker_error {
            return Err(e);
        }
        Ok(tallies)
    })
}

fn summarize_pass(
    config: &TrainerConfig,
    stats: &GraphStats,
    shared_v: &HogwildPartition,
    pass: usize,
    tallies: &[WorkerTally],
    started: Instant,
) -> PassReport {
    let grid = &config.grid;
    let layout = grid.layout();
    let num_models = grid.num_models();

    let mut traffic = ClientTrafficLog::default();
    let mut positives = 0u64;
    let mut negatives = 0u64;
    let mut numeric_errors = 0u64;
    let mut events_ok = 0u64;
    let mut sq_err_sum = 0.0f64;
    let mut sampled_events = 0u64;
    let mut sampled_half_w_sq = vec![0.0f64; num_models];
    let mut u_sample: Vec<&[f32]> = Vec::new();
    let mut u_keys = 0u64;
    let mut g_keys = 0u64;
    for tally in tallies {
        traffic.merge(&tally.traffic);
        positives += tally.positives;
        negatives += tally.negatives;
        numeric_errors += tally.numeric_errors;
        events_ok += tally.events_ok;
        sq_err_sum += tally.sq_err_sum;
        sampled_events += tally.sampled_events;
        for (p, v) in tally.sampled_half_w_sq.iter().enumerate() {
            sampled_half_w_sq[p] += v;
        }
        u_sample.extend(tally.sampled_u.iter().map(|v| v.as_slice()));
        u_keys += tally.u_keys_fetched;
        g_keys += tally.g_keys_fetched;
    }
    // every wire key must be attributable to a row fetch or a g fetch;
    // anything else would be column traffic defeating the partitioning
    let v_keys_fetched = traffic.keys_fetched.saturating_sub(u_keys + g_keys);

    let total_events = positives + negatives;
    let mse = if events_ok > 0 {
        sq_err_sum / (events_ok * num_models as u64) as f64
    } else {
        0.0
    };

    let last_g = tallies.last().map(|t| t.last_g.clone()).unwrap_or_default();
    let local_cols = shared_v.get().num_vectors() as u64;
    let col_scale = if local_cols > 0 {
        stats.num_cols.max(local_cols) as f64 / local_cols as f64
    } else {
        0.0
    };
    let mut loss_error_est = 0.0f64;
    let mut loss_reg_est = 0.0f64;
    for (p, combo) in grid.combos().iter().enumerate() {
        if sampled_events > 0 {
            loss_error_est +=
                sampled_half_w_sq[p] * total_events as f64 / sampled_events as f64;
        }
        let half_lambda = 0.5 * combo.lambda as f64;
        let g_term = last_g.get(p).map_or(0.0, |&g| (g as f64) * (g as f64));
        let mut reg = half_lambda * g_term;
        if !u_sample.is_empty() {
            let sampled: f64 = u_sample
                .iter()
                .map(|vec| {
                    vec[layout.slice_range(p)]
                        .iter()
                        .map(|&x| (x as f64) * (x as f64))
                        .sum::<f64>()
                })
                .sum();
            reg += half_lambda * sampled * stats.num_rows.max(1) as f64 / u_sample.len() as f64;
        }
        let mut v_norm = 0.0f64;
        for (_, vec) in shared_v.get().iter() {
            v_norm += vec[layout.slice_range(p)]
                .iter()
                .map(|&x| (x as f64) * (x as f64))
                .sum::<f64>();
        }
        reg += half_lambda * v_norm * col_scale;
        loss_reg_est += reg;
    }
    loss_error_est /= num_models as f64;
    loss_reg_est /= num_models as f64;

    debug!(
        "pass {pass}: traffic {} fetched / {} written over {} round trips",
        traffic.keys_fetched, traffic.keys_written, traffic.round_trips
    );

    PassReport {
        pass,
        positives,
        negatives,
        mse,
        loss_error_est,
        loss_reg_est,
        seconds: started.elapsed().as_secs_f64(),
        u_keys_fetched: u_keys,
        v_keys_fetched,
        numeric_errors,
        traffic,
    }
}

/// Where a finished model gets written.
#[derive(Debug, Clone)]
pub struct ExportPaths {
    pub u: PathBuf,
    pub v: PathBuf,
    pub g: PathBuf,
}

/// Exports the local V partition, the requested U rows (fetched from the
/// parameter store; never-trained rows export as their lazy-init vectors),
/// and the global biases. Partial files are removed on failure.
pub fn export_matrices(
    local_v: &FactorMatrixPartition,
    client: &mut dyn ParameterStore,
    row_ids: &[u64],
    num_models: usize,
    paths: &ExportPaths,
) -> Result<(), TrainError> {
    let result = export_inner(local_v, client, row_ids, num_models, paths);
    if result.is_err() {
        for path in [&paths.u, &paths.v, &paths.g] {
            let _ = std::fs::remove_file(path);
        }
    }
    result
}

fn export_inner(
    local_v: &FactorMatrixPartition,
    client: &mut dyn ParameterStore,
    row_ids: &[u64],
    num_models: usize,
    paths: &ExportPaths,
) -> Result<(), TrainError> {
    export_rows_and_bias(client, row_ids, num_models, &paths.u, &paths.g)?;
    save_factor_matrix(&paths.v, local_v.width(), local_v.iter())?;
    Ok(())
}

/// Exports the requested U rows and the global biases, both fetched from
/// the parameter store. Rows are written in the requested order.
pub fn export_rows_and_bias(
    client: &mut dyn ParameterStore,
    row_ids: &[u64],
    num_models: usize,
    u_path: &Path,
    g_path: &Path,
) -> Result<(), TrainError> {
    let width = client.width();
    let mut rows: Vec<(u64, Vec<f32>)> = Vec::with_capacity(row_ids.len());
    for chunk in row_ids.chunks(4096) {
        let mut fetched = client.fetch_batch(chunk)?;
        for &id in chunk {
            let vector = fetched
                .remove(&id)
                .ok_or_else(|| TrainError::Internal(format!("row {id} missing from fetch")))?;
            rows.push((id, vector));
        }
    }
    save_factor_matrix(u_path, width, rows.iter().map(|(id, v)| (*id, v.as_slice())))?;

    let g_keys: Vec<u64> = (0..num_models).map(global_bias_key).collect();
    let fetched = client.fetch_batch(&g_keys)?;
    let mut g = GlobalBias::zeros(num_models);
    for (p, key) in g_keys.iter().enumerate() {
        let vector = fetched
            .get(key)
            .ok_or_else(|| TrainError::Internal("g key missing from fetch".into()))?;
        g.set(p, vector[0]);
    }
    save_global_bias(g_path, &g)?;
    Ok(())
}
