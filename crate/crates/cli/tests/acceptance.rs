//! Acceptance suite. Each test checks one release criterion end to end and
//! prints one PASS line (visible with `--nocapture`):
//!
//!  1. gradient oracle (finite differences, 100 random configurations)
//!  2. packed grid equals separate single-model runs, bit for bit
//!  3. model-complexity ordering of test RMSE on planted-structure data
//!  4. local in-process run equals networked run, bit for bit
//!  5. lock-free 4-thread training within 5% of single-thread RMSE
//!  6. column locality: zero V keys on the wire, traffic halved
//!  7. whole-vector atomicity under concurrent mixed load
//!  8. negative-sampling ratio law (exact counts, local columns)
//!  9. full-pipeline determinism through the CLI binary
//!
//! Run with: cargo test -p factorbird-cli --test acceptance -- --nocapture

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use factorbird_core::client::{ClientConfig, ClientError, InProcessClient, ParamClient, ParameterStore};
use factorbird_core::dataprep::{self, SplitPaths, SplitRatios};
use factorbird_core::eval::{holdout_rmse, LookupSource, StoreSource};
use factorbird_core::model::{
    sgd_step, EdgeContext, HyperGrid, Hyperparameters, ModelVariant, V_KEY_DOMAIN,
};
use factorbird_core::store::{read_all_edges, Edge, EdgeFileWriter, FactorMatrixPartition, GraphStats};
use factorbird_core::synth::{generate, SyntheticSpec};
use factorbird_core::trainer::{global_bias_key, mix_negatives, stream_edges, train, TrainerConfig};
use factorbird_core::util::model_stream_seed;
use factorbird_core::{GlobalBias, VectorStore};

// ---------------------------------------------------------------------------
// shared plumbing

struct Workbench {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workbench {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        Workbench { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

fn write_edges(path: &Path, edges: &[Edge]) {
    let mut writer = EdgeFileWriter::create(path).unwrap();
    for edge in edges {
        writer.write(edge).unwrap();
    }
    writer.finish().unwrap();
}

struct PreparedRun {
    partition: PathBuf,
    stats_path: PathBuf,
    stats: GraphStats,
    columns: Vec<u64>,
    validation: Vec<Edge>,
    test: Vec<Edge>,
}

/// Splits synthetic edges 80/10/10, computes stats, and builds one shuffled
/// column partition, like `prep` does.
fn prepare(bench: &Workbench, tag: &str, edges: &[Edge], seed: u64) -> PreparedRun {
    let dir = bench.path(tag);
    std::fs::create_dir_all(&dir).unwrap();
    let all = dir.join("all.fbed");
    write_edges(&all, edges);
    let splits = SplitPaths {
        train: dir.join("train.fbed"),
        validation: dir.join("validation.fbed"),
        test: dir.join("test.fbed"),
    };
    dataprep::split(
        &all,
        SplitRatios::new(0.8, 0.1, 0.1).unwrap(),
        seed,
        &splits,
        false,
    )
    .unwrap();
    let (stats, _) = dataprep::compute_stats(&splits.train).unwrap();
    let stats_path = dir.join("stats.fbst");
    stats.save(&stats_path).unwrap();
    let manifests = dataprep::partition_by_column(&splits.train, 1, seed, &dir.join("parts")).unwrap();
    PreparedRun {
        partition: dir.join("parts").join(&manifests[0].path),
        stats_path,
        columns: manifests[0].column_ids.clone(),
        stats,
        validation: read_all_edges(&splits.validation).unwrap(),
        test: read_all_edges(&splits.test).unwrap(),
    }
}

fn in_process_factory(
    store: Arc<VectorStore>,
    batch: usize,
) -> impl Fn() -> Result<Box<dyn ParameterStore>, ClientError> + Sync {
    move || {
        Ok(Box::new(InProcessClient::new(Arc::clone(&store)).with_max_batch(batch))
            as Box<dyn ParameterStore>)
    }
}

/// Trains one grid on a prepared instance against a fresh in-process store;
/// returns the store, the trained V partition, and the per-pass reports.
struct RunResult {
    store: Arc<VectorStore>,
    local_v: FactorMatrixPartition,
    reports: Vec<factorbird_core::PassReport>,
    config: TrainerConfig,
}

#[allow(clippy::too_many_arguments)]
fn run_in_process(
    prep: &PreparedRun,
    grid: &HyperGrid,
    seed: u64,
    init_seed: u64,
    passes: usize,
    threads: usize,
    negative_rate: f64,
    batch: usize,
) -> RunResult {
    let layout = grid.layout();
    let store = Arc::new(VectorStore::new(layout, init_seed, 0.01));
    let mut config = TrainerConfig::new(
        prep.partition.clone(),
        prep.stats_path.clone(),
        grid.clone(),
        seed,
    );
    config.init_seed = init_seed;
    config.passes = passes;
    config.threads = threads;
    config.negative_rate = negative_rate;
    config.fetch_batch_size = batch;
    let partition = FactorMatrixPartition::allocate(&prep.columns, layout.width()).unwrap();
    let outcome = train(&config, partition, &in_process_factory(Arc::clone(&store), batch)).unwrap();
    RunResult {
        store,
        local_v: outcome.local_v,
        reports: outcome.reports,
        config,
    }
}

/// Hold-out RMSE of a finished in-process run (U from the store, V from the
/// local partition with lazy-init fallback).
fn rmse_of(run: &RunResult, edges: &[Edge], grid: &HyperGrid) -> Vec<f64> {
    let layout = grid.layout();
    let mut client = InProcessClient::new(Arc::clone(&run.store));
    let mut u = StoreSource(&mut client);
    let mut v = LookupSource::new(
        &run.local_v,
        layout,
        run.config.init_seed,
        run.config.init_stddev,
        V_KEY_DOMAIN,
    );
    let mut g = GlobalBias::zeros(grid.num_models());
    for p in 0..grid.num_models() {
        g.set(p, run.store.get_or_init(global_bias_key(p))[0]);
    }
    holdout_rmse(edges, &mut u, &mut v, &g, grid).unwrap()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

// ---------------------------------------------------------------------------
// criterion 1: gradient oracle

/// The per-edge regularized objective in f64: parameters laid out as
/// [g, u_bias, u_1..u_k, v_bias, v_1..v_k].
fn per_edge_objective(theta: &[f64], k: usize, a: f64, w: f64, lambda: f64, ni: f64, nj: f64) -> f64 {
    let g = theta[0];
    let u = &theta[1..k + 2];
    let v = &theta[k + 2..];
    let mut p = g + u[0] + v[0];
    for t in 1..=k {
        p += u[t] * v[t];
    }
    let error = 0.5 * w * (p - a) * (p - a);
    let mut reg = g * g;
    for t in 0..=k {
        reg += u[t] * u[t] / ni + v[t] * v[t] / nj;
    }
    error + 0.5 * lambda * reg
}

#[test]
fn criterion_1_sgd_step_matches_finite_difference_gradient() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xFB01);
    let eta = 0.5f32;
    let mut tested = 0usize;

    while tested < 100 {
        let k = rng.gen_range(1..=8usize);
        let lambda = rng.gen_range(0.0..1.0f32);
        let w = rng.gen_range(0.5..2.0f32);
        let a = rng.gen_range(-2.0..2.0f32);
        let ni = rng.gen_range(1..50u32);
        let nj = rng.gen_range(1..50u32);
        let g0: f32 = rng.gen_range(-1.0..1.0);
        let u0: Vec<f32> = (0..=k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v0: Vec<f32> = (0..=k).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // keep away from the fixed point so relative error is well defined
        let p: f32 = g0 + u0[0] + v0[0] + (1..=k).map(|t| u0[t] * v0[t]).sum::<f32>();
        if (a - p).abs() < 0.1 {
            continue;
        }

        let theta: Vec<f64> = std::iter::once(g0 as f64)
            .chain(u0.iter().map(|&x| x as f64))
            .chain(v0.iter().map(|&x| x as f64))
            .collect();
        let dims = theta.len();

        // central finite differences of the f64 objective
        let mut grad = vec![0.0f64; dims];
        for d in 0..dims {
            let h = 1e-5 * theta[d].abs().max(1.0);
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[d] += h;
            minus[d] -= h;
            grad[d] = (per_edge_objective(&plus, k, a as f64, w as f64, lambda as f64, ni as f64, nj as f64)
                - per_edge_objective(&minus, k, a as f64, w as f64, lambda as f64, ni as f64, nj as f64))
                / (2.0 * h);
        }
        let grad_norm = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
        if grad_norm < 0.05 {
            continue;
        }

        // one implementation step
        let mut u = u0.clone();
        let mut v = v0.clone();
        let mut g = g0;
        let h = Hyperparameters::new(eta, lambda, 1.0, k);
        let ctx = EdgeContext {
            strength: a,
            weight: w,
            out_degree: ni,
            in_degree: nj,
        };
        sgd_step(&mut u, &mut v, &mut g, &ctx, &h, eta).unwrap();

        let displacement: Vec<f64> = std::iter::once((g - g0) as f64)
            .chain(u.iter().zip(&u0).map(|(n, o)| (n - o) as f64))
            .chain(v.iter().zip(&v0).map(|(n, o)| (n - o) as f64))
            .collect();

        // displacement = -eta * grad, so displacement/eta + grad ~ 0
        let mut diff_sq = 0.0f64;
        for d in 0..dims {
            let residual = displacement[d] / eta as f64 + grad[d];
            diff_sq += residual * residual;
        }
        let relative = diff_sq.sqrt() / grad_norm;
        assert!(
            relative < 1e-4,
            "config {tested}: relative gradient error {relative:.3e} (k={k}, lambda={lambda})"
        );
        tested += 1;
    }

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    println!(
        "acceptance criterion 1 (gradient oracle, 100 configs, rel err < 1e-4): PASS in {elapsed:.2?}"
    );
}

// ---------------------------------------------------------------------------
// criterion 2: packed grid == separate runs

#[test]
fn criterion_2_packed_grid_equals_separate_runs_bitwise() {
    let started = Instant::now();
    let bench = Workbench::new();
    let spec = SyntheticSpec {
        rows: 1000,
        cols: 1000,
        rank: 2,
        density: 0.012,
        global_bias: 0.2,
        bias_stddev: 0.25,
        factor_stddev: 0.3,
        noise_stddev: 0.05,
        seed: 0xFB02,
    };
    let edges = generate(&spec);
    let prep = prepare(&bench, "c2", &edges, 0xFB02);

    let grid = HyperGrid::cross(&[0.08, 0.05], &[0.01, 0.1], 0.9, 2).unwrap();
    let layout = grid.layout();
    let seed = 4242u64;
    let init_seed = 777u64;

    let packed = run_in_process(&prep, &grid, seed, init_seed, 2, 1, 1.0, 512);
    let packed_rmse = rmse_of(&packed, &prep.validation, &grid);

    for (p, combo) in grid.combos().iter().enumerate() {
        let single = HyperGrid::single(*combo).unwrap();
        // a separate run reproduces slice p's init stream by deriving its
        // base seed from the packed run's
        let separate = run_in_process(
            &prep,
            &single,
            seed,
            model_stream_seed(init_seed, p),
            2,
            1,
            1.0,
            512,
        );

        // V slices, bit for bit
        for &id in &prep.columns {
            let wide = packed.local_v.vector_of(id).unwrap();
            let narrow = separate.local_v.vector_of(id).unwrap();
            let wide_bits: Vec<u32> =
                wide[layout.slice_range(p)].iter().map(|x| x.to_bits()).collect();
            let narrow_bits: Vec<u32> = narrow.iter().map(|x| x.to_bits()).collect();
            assert_eq!(wide_bits, narrow_bits, "V slice {p} differs at column {id}");
        }

        // U rows, bit for bit (trained and lazily initialized alike)
        let mut row_ids: Vec<u64> = prep.stats.out_degree.keys().copied().collect();
        row_ids.sort_unstable();
        row_ids.push(123_456_789); // never trained
        let mut packed_client = InProcessClient::new(Arc::clone(&packed.store));
        let mut separate_client = InProcessClient::new(Arc::clone(&separate.store));
        let wide_rows = packed_client.fetch_batch(&row_ids).unwrap();
        let narrow_rows = separate_client.fetch_batch(&row_ids).unwrap();
        for &id in &row_ids {
            let wide_bits: Vec<u32> = wide_rows[&id][layout.slice_range(p)]
                .iter()
                .map(|x| x.to_bits())
                .collect();
            let narrow_bits: Vec<u32> =
                narrow_rows[&id].iter().map(|x| x.to_bits()).collect();
            assert_eq!(wide_bits, narrow_bits, "U slice {p} differs at row {id}");
        }

        // global bias, bit for bit
        let packed_g = packed.store.get_or_init(global_bias_key(p))[0];
        let separate_g = separate.store.get_or_init(global_bias_key(0))[0];
        assert_eq!(packed_g.to_bits(), separate_g.to_bits(), "g differs for model {p}");

        // hold-out RMSE, exactly equal
        let separate_rmse = rmse_of(&separate, &prep.validation, &single);
        assert_eq!(
            packed_rmse[p], separate_rmse[0],
            "RMSE differs for model {p}"
        );
    }

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    println!(
        "acceptance criterion 2 (c=4 packed == 4 separate runs, bitwise): PASS in {elapsed:.2?}"
    );
}

// ---------------------------------------------------------------------------
// criteria 3 & 5: model-complexity ordering and lock-free tolerance
// (one shared training campaign over 5 seeds)

struct OrderingData {
    /// median test RMSE for [global-only, +vertex biases, k=2, k=5]
    medians: [f64; 4],
    /// per-seed validation RMSE of k=5 with 1 and 4 threads
    k5_validation_1t: Vec<f64>,
    k5_validation_4t: Vec<f64>,
    build_time: Duration,
}

static ORDERING: OnceLock<OrderingData> = OnceLock::new();

fn ordering_data() -> &'static OrderingData {
    ORDERING.get_or_init(|| {
        let started = Instant::now();
        let bench = Workbench::new();
        let mut test_rmse: [Vec<f64>; 4] = Default::default();
        let mut k5_validation_1t = Vec::new();
        let mut k5_validation_4t = Vec::new();

        for seed in 1..=5u64 {
            let spec = SyntheticSpec {
                rows: 2000,
                cols: 1500,
                rank: 5,
                density: 0.05,
                global_bias: 0.2,
                bias_stddev: 0.3,
                factor_stddev: 0.45,
                noise_stddev: 0.05,
                seed: 9000 + seed,
            };
            let edges = generate(&spec);
            let prep = prepare(&bench, &format!("c3-seed{seed}"), &edges, 100 + seed);

            let configs: [HyperGrid; 4] = [
                HyperGrid::single(
                    Hyperparameters::new(0.1, 0.01, 0.95, 1)
                        .with_variant(ModelVariant::GlobalBiasOnly),
                )
                .unwrap(),
                HyperGrid::single(
                    Hyperparameters::new(0.1, 0.01, 0.95, 1).with_variant(ModelVariant::BiasOnly),
                )
                .unwrap(),
                HyperGrid::single(Hyperparameters::new(0.08, 0.02, 0.95, 2)).unwrap(),
                HyperGrid::single(Hyperparameters::new(0.08, 0.02, 0.95, 5)).unwrap(),
            ];

            // block size 64: with only 2000 rows, larger in-flight blocks
            // overlap on most rows and whole-vector write-back loses too
            // many concurrent updates to converge at 4 threads
            for (slot, grid) in configs.iter().enumerate() {
                let run = run_in_process(&prep, grid, 300 + seed, 500 + seed, 25, 1, 0.0, 64);
                test_rmse[slot].push(rmse_of(&run, &prep.test, grid)[0]);
                if slot == 3 {
                    k5_validation_1t.push(rmse_of(&run, &prep.validation, grid)[0]);
                    let run4 = run_in_process(&prep, grid, 300 + seed, 500 + seed, 25, 4, 0.0, 64);
                    k5_validation_4t.push(rmse_of(&run4, &prep.validation, grid)[0]);
                }
            }
        }

        OrderingData {
            medians: [
                median(&mut test_rmse[0]),
                median(&mut test_rmse[1]),
                median(&mut test_rmse[2]),
                median(&mut test_rmse[3]),
            ],
            k5_validation_1t,
            k5_validation_4t,
            build_time: started.elapsed(),
        }
    })
}

#[test]
fn criterion_3_test_rmse_improves_strictly_with_model_complexity() {
    let data = ordering_data();
    let [global_only, biases, k2, k5] = data.medians;
    assert!(
        global_only > biases,
        "vertex biases must beat the global bias: {global_only:.4} vs {biases:.4}"
    );
    assert!(
        biases > k2,
        "k=2 must beat bias-only: {biases:.4} vs {k2:.4}"
    );
    assert!(k2 > k5, "k=5 must beat k=2: {k2:.4} vs {k5:.4}");
    assert!(
        k5 < 0.5 * global_only,
        "k=5 must halve the global-bias RMSE: {k5:.4} vs {global_only:.4}"
    );
    assert!(
        data.build_time < Duration::from_secs(300),
        "campaign took {:?}",
        data.build_time
    );
    println!(
        "acceptance criterion 3 (complexity ordering {global_only:.4} > {biases:.4} > {k2:.4} > {k5:.4}, \
         k5 < 50% of global): PASS in {:.2?}",
        data.build_time
    );
}

#[test]
fn criterion_5_four_thread_hogwild_stays_within_five_percent() {
    let data = ordering_data();
    let mut one = data.k5_validation_1t.clone();
    let mut four = data.k5_validation_4t.clone();
    let median_1t = median(&mut one);
    let median_4t = median(&mut four);
    let relative = (median_4t - median_1t).abs() / median_1t;
    assert!(
        relative <= 0.05,
        "4-thread RMSE {median_4t:.4} deviates {relative:.3} from 1-thread {median_1t:.4}"
    );
    println!(
        "acceptance criterion 5 (hogwild 4-thread vs 1-thread RMSE: {median_4t:.4} vs {median_1t:.4}, \
         {:.2}% relative): PASS",
        relative * 100.0
    );
}

// ---------------------------------------------------------------------------
// criterion 4: local == networked, through the CLI binary

struct ServerGuard(Child);

impl Drop for ServerGuard {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn factorbird() -> Command {
    Command::new(env!("CARGO_BIN_EXE_factorbird"))
}

fn run_ok(args: &[&str]) {
    let output = factorbird().args(args).output().expect("binary runs");
    assert!(
        output.status.success(),
        "factorbird {args:?} failed: {}{}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr),
    );
}

fn spawn_server(width: usize, stride: usize, seed: u64) -> (ServerGuard, String) {
    use std::io::BufRead;
    let mut child = factorbird()
        .args([
            "serve",
            "--bind",
            "127.0.0.1:0",
            "--width",
            &width.to_string(),
            "--stride",
            &stride.to_string(),
            "--seed",
            &seed.to_string(),
            "--stddev",
            "0.01",
        ])
        .stdout(Stdio::piped())
        .spawn()
        .expect("server spawns");
    let stdout = child.stdout.take().unwrap();
    let mut line = String::new();
    std::io::BufReader::new(stdout).read_line(&mut line).unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .expect("server prints its address")
        .to_string();
    (ServerGuard(child), addr)
}

fn write_edges_as_tsv(path: &Path, edges: &[Edge]) {
    let mut text = String::new();
    for edge in edges {
        text.push_str(&format!("{}\t{}\t{}\n", edge.i, edge.j, edge.a));
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn criterion_4_local_and_networked_cli_runs_are_byte_identical() {
    let started = Instant::now();
    let bench = Workbench::new();
    let spec = SyntheticSpec {
        rows: 300,
        cols: 200,
        rank: 2,
        density: 0.05,
        global_bias: 0.2,
        bias_stddev: 0.25,
        factor_stddev: 0.3,
        noise_stddev: 0.05,
        seed: 0xFB04,
    };
    let input = bench.path("edges.tsv");
    write_edges_as_tsv(&input, &generate(&spec));

    let prep_dir = bench.path("prep");
    run_ok(&[
        "prep",
        "--input",
        input.to_str().unwrap(),
        "--out",
        prep_dir.to_str().unwrap(),
        "--seed",
        "21",
        "--partitions",
        "1",
    ]);

    let grid_path = bench.path("grid.json");
    std::fs::write(
        &grid_path,
        r#"[{"eta0":0.05,"lambda":0.01,"decay":0.9,"k":2},{"eta0":0.1,"lambda":0.01,"decay":0.9,"k":2}]"#,
    )
    .unwrap();
    let knobs = [
        "--grid",
        grid_path.to_str().unwrap(),
        "--passes",
        "2",
        "--threads",
        "1",
        "--negative-rate",
        "1.0",
        "--seed",
        "21",
        "--stddev",
        "0.01",
    ];

    let local_dir = bench.path("local");
    let mut local_args = vec![
        "local",
        "--prep",
        prep_dir.to_str().unwrap(),
        "--out",
        local_dir.to_str().unwrap(),
    ];
    local_args.extend_from_slice(&knobs);
    run_ok(&local_args);

    // width = 2 models * (k + 1) = 6, stride = 3
    let (_server, addr) = spawn_server(6, 3, 21);
    let net_dir = bench.path("networked");
    let mut net_args = vec![
        "train",
        "--prep",
        prep_dir.to_str().unwrap(),
        "--partition-index",
        "0",
        "--servers",
        &addr,
        "--out",
        net_dir.to_str().unwrap(),
    ];
    net_args.extend_from_slice(&knobs);
    run_ok(&net_args);

    for name in ["u.fbfm", "v-part00000.fbfm", "g.json"] {
        let local = std::fs::read(local_dir.join(name)).unwrap();
        let networked = std::fs::read(net_dir.join(name)).unwrap();
        assert_eq!(local, networked, "{name} differs between local and networked runs");
    }

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    println!(
        "acceptance criterion 4 (local vs networked export, byte-identical): PASS in {elapsed:.2?}"
    );
}

// ---------------------------------------------------------------------------
// criterion 6: V locality and the traffic halving it buys

#[test]
fn criterion_6_column_locality_halves_network_key_traffic() {
    let started = Instant::now();
    let bench = Workbench::new();
    // square instance: per-block distinct-row and distinct-column counts
    // match in expectation, which is what the 50% argument assumes
    let spec = SyntheticSpec {
        rows: 450,
        cols: 450,
        rank: 2,
        density: 0.1,
        global_bias: 0.2,
        bias_stddev: 0.25,
        factor_stddev: 0.3,
        noise_stddev: 0.05,
        seed: 0xFB06,
    };
    let edges = generate(&spec);
    let prep = prepare(&bench, "c6", &edges, 0xFB06);

    let grid = HyperGrid::cross(&[0.05, 0.08], &[0.01], 0.9, 2).unwrap();
    let num_models = grid.num_models();
    let batch = 256usize;
    let passes = 2usize;
    let seed = 66u64;
    let run = run_in_process(&prep, &grid, seed, seed, passes, 4, 1.0, batch);

    let columns: Arc<Vec<u64>> = Arc::new(prep.columns.clone());
    let row_range = prep.stats.row_id_range().unwrap();

    for (pass, report) in run.reports.iter().enumerate() {
        // replay the deterministic block stream of this pass
        let pass_seed = factorbird_core::util::mix64(seed, pass as u64);
        let mixer = mix_negatives(
            stream_edges(&prep.partition).unwrap(),
            1.0,
            1.0,
            Arc::clone(&columns),
            row_range,
            pass_seed,
        )
        .unwrap();
        let stream: Vec<Edge> = mixer.map(|e| e.unwrap()).collect();
        let mut expected_u_fetches = 0u64;
        let mut analytic_v_keys = 0u64;
        let mut blocks = 0u64;
        for block in stream.chunks(batch) {
            let distinct_rows: HashSet<u64> = block.iter().map(|e| e.i).collect();
            let distinct_cols: HashSet<u64> = block.iter().map(|e| e.j).collect();
            expected_u_fetches += distinct_rows.len() as u64;
            analytic_v_keys += distinct_cols.len() as u64;
            blocks += 1;
        }

        // zero V keys on the wire, and U fetches exactly match the
        // block-batching accounting
        assert_eq!(report.v_keys_fetched, 0, "pass {pass}: V keys crossed the network");
        assert_eq!(
            report.u_keys_fetched, expected_u_fetches,
            "pass {pass}: U fetch count off"
        );

        // the halving argument: our key traffic vs a both-matrices-remote
        // configuration (which would fetch and write V per block too)
        let ours = report.traffic.keys_fetched + report.traffic.keys_written;
        let both_remote = ours + 2 * analytic_v_keys;
        let allowance = 2 * num_models as u64 * blocks; // g keys ride along per block
        assert!(
            ours <= both_remote / 2 + allowance,
            "pass {pass}: {ours} keys vs both-remote {both_remote} (allowance {allowance})"
        );
    }

    let elapsed = started.elapsed();
    println!(
        "acceptance criterion 6 (zero V keys, U fetches == block accounting, traffic halved): \
         PASS in {elapsed:.2?}"
    );
}

// ---------------------------------------------------------------------------
// criterion 7: atomicity stress

#[test]
fn criterion_7_no_torn_vectors_under_concurrent_mixed_load() {
    let started = Instant::now();
    let layout = factorbird_core::ModelLayout::new(7, 2); // width 16
    let server = factorbird_core::server::serve(&factorbird_core::ServerConfig {
        bind: "127.0.0.1:0".into(),
        layout,
        init_seed: 7,
        init_stddev: 0.01,
    })
    .unwrap();
    let width = layout.width();
    let addr = server.local_addr().to_string();

    // seed all 100 keys with valid patterns
    {
        let mut client = ParamClient::connect(ClientConfig::new(vec![addr.clone()], width)).unwrap();
        for key in 0..100u64 {
            let vector: Vec<f32> = (0..width).map(|slot| slot as f32).collect();
            client.write_batch(&[(key, vector.as_slice())]).unwrap();
        }
    }

    let clients: Vec<_> = (0..8)
        .map(|t: u32| {
            let addr = addr.clone();
            std::thread::spawn(move || {
                let mut client =
                    ParamClient::connect(ClientConfig::new(vec![addr], width)).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
                let mut checked = 0u64;
                for op in 0..10_000u32 {
                    let key = rng.gen_range(0..100u64);
                    if op % 2 == 0 {
                        // tagged put: slot i = nonce * 1000 + i, exact in f32
                        let nonce = (t * 10_000 + op) as f32;
                        let vector: Vec<f32> =
                            (0..width).map(|slot| nonce * 1000.0 + slot as f32).collect();
                        client.write_batch(&[(key, vector.as_slice())]).unwrap();
                    } else {
                        let fetched = client.fetch_batch(&[key]).unwrap();
                        let vector = &fetched[&key];
                        let base = vector[0];
                        for (slot, &value) in vector.iter().enumerate() {
                            assert_eq!(
                                value,
                                base + slot as f32,
                                "torn vector at key {key}: {vector:?}"
                            );
                        }
                        checked += 1;
                    }
                }
                checked
            })
        })
        .collect();

    let mut verified = 0u64;
    for client in clients {
        verified += client.join().unwrap();
    }
    assert_eq!(verified, 8 * 5_000);

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    println!(
        "acceptance criterion 7 (8 clients x 10k mixed ops, zero torn vectors): PASS in {elapsed:.2?}"
    );
}

// ---------------------------------------------------------------------------
// criterion 8: negative-ratio law

#[test]
fn criterion_8_negative_ratio_five_yields_exact_event_counts() {
    let started = Instant::now();
    let bench = Workbench::new();
    let spec = SyntheticSpec {
        rows: 200,
        cols: 150,
        rank: 2,
        density: 0.4,
        global_bias: 0.2,
        bias_stddev: 0.25,
        factor_stddev: 0.3,
        noise_stddev: 0.05,
        seed: 0xFB08,
    };
    let mut edges = generate(&spec);
    assert!(edges.len() >= 10_000, "need at least 10k positives");
    edges.truncate(10_000);

    // build the partition directly from exactly these positives
    let dir = bench.path("c8");
    std::fs::create_dir_all(&dir).unwrap();
    let train_path = dir.join("train.fbed");
    write_edges(&train_path, &edges);
    let (stats, _) = dataprep::compute_stats(&train_path).unwrap();
    let stats_path = dir.join("stats.fbst");
    stats.save(&stats_path).unwrap();
    let manifests = dataprep::partition_by_column(&train_path, 1, 8, &dir.join("parts")).unwrap();
    let prep = PreparedRun {
        partition: dir.join("parts").join(&manifests[0].path),
        stats_path,
        columns: manifests[0].column_ids.clone(),
        stats,
        validation: Vec::new(),
        test: Vec::new(),
    };

    let grid = HyperGrid::single(Hyperparameters::new(0.05, 0.01, 1.0, 2)).unwrap();
    let seed = 88u64;
    let run = run_in_process(&prep, &grid, seed, seed, 2, 2, 5.0, 512);
    for report in &run.reports {
        assert_eq!(report.positives, 10_000);
        assert_eq!(report.negatives, 50_000);
        assert_eq!(report.positives + report.negatives, 60_000);
        assert_eq!(report.v_keys_fetched, 0);
    }

    // every synthesized negative stays inside the local column partition
    let columns: HashSet<u64> = prep.columns.iter().copied().collect();
    let column_list: Arc<Vec<u64>> = Arc::new(prep.columns.clone());
    let row_range = prep.stats.row_id_range().unwrap();
    for pass in 0..2u64 {
        let mixer = mix_negatives(
            stream_edges(&prep.partition).unwrap(),
            5.0,
            1.0,
            Arc::clone(&column_list),
            row_range,
            factorbird_core::util::mix64(seed, pass),
        )
        .unwrap();
        let mut negatives = 0u64;
        for edge in mixer {
            let edge = edge.unwrap();
            if edge.synthetic_negative {
                negatives += 1;
                assert!(columns.contains(&edge.j), "negative j {} is not local", edge.j);
                assert!(edge.i >= row_range.0 && edge.i <= row_range.1);
                assert_eq!(edge.a, 0.0);
            }
        }
        assert_eq!(negatives, 50_000);
    }

    let elapsed = started.elapsed();
    println!(
        "acceptance criterion 8 (rho=5 on 10k positives -> exactly 60k events, negatives local): \
         PASS in {elapsed:.2?}"
    );
}

// ---------------------------------------------------------------------------
// criterion 9: full-pipeline determinism through the binary

#[test]
fn criterion_9_repeated_pipelines_are_byte_identical() {
    let started = Instant::now();
    let bench = Workbench::new();
    let spec = SyntheticSpec {
        rows: 250,
        cols: 180,
        rank: 2,
        density: 0.06,
        global_bias: 0.2,
        bias_stddev: 0.25,
        factor_stddev: 0.3,
        noise_stddev: 0.05,
        seed: 0xFB09,
    };
    let input = bench.path("edges.tsv");
    write_edges_as_tsv(&input, &generate(&spec));
    let grid_path = bench.path("grid.json");
    std::fs::write(
        &grid_path,
        r#"[{"eta0":0.05,"lambda":0.01,"decay":0.9,"k":2},{"eta0":0.1,"lambda":0.1,"decay":0.9,"k":2}]"#,
    )
    .unwrap();

    let mut artifact_sets: Vec<Vec<(String, Vec<u8>)>> = Vec::new();
    for round in 0..2 {
        let root = bench.path(&format!("round{round}"));
        std::fs::create_dir_all(&root).unwrap();
        let prep_dir = root.join("prep");
        run_ok(&[
            "prep",
            "--input",
            input.to_str().unwrap(),
            "--out",
            prep_dir.to_str().unwrap(),
            "--seed",
            "99",
            "--partitions",
            "1",
        ]);
        let model_dir = root.join("model");
        run_ok(&[
            "local",
            "--prep",
            prep_dir.to_str().unwrap(),
            "--out",
            model_dir.to_str().unwrap(),
            "--grid",
            grid_path.to_str().unwrap(),
            "--passes",
            "2",
            "--threads",
            "1",
            "--negative-rate",
            "1.5",
            "--seed",
            "99",
        ]);
        for (split, file) in [("validation", "validation.json"), ("test", "test.json")] {
            run_ok(&[
                "eval",
                "--edges",
                prep_dir.join(format!("{split}.fbed")).to_str().unwrap(),
                "--split",
                split,
                "--model",
                model_dir.to_str().unwrap(),
                "--report",
                root.join(file).to_str().unwrap(),
                "--seed",
                "99",
                "--grid",
                grid_path.to_str().unwrap(),
            ]);
        }

        let mut artifacts = Vec::new();
        for name in ["model/u.fbfm", "model/v-part00000.fbfm", "model/g.json"] {
            artifacts.push((name.to_string(), std::fs::read(root.join(name)).unwrap()));
        }
        for name in ["validation.json", "test.json"] {
            artifacts.push((name.to_string(), std::fs::read(root.join(name)).unwrap()));
        }
        artifact_sets.push(artifacts);
    }

    let (first, second) = (&artifact_sets[0], &artifact_sets[1]);
    for ((name_a, bytes_a), (_, bytes_b)) in first.iter().zip(second) {
        assert_eq!(bytes_a, bytes_b, "{name_a} differs between pipeline runs");
    }

    let elapsed = started.elapsed();
    println!(
        "acceptance criterion 9 (two identical pipelines -> byte-identical exports and reports): \
         PASS in {elapsed:.2?}"
    );
}
