//! Command-line orchestration: argument parsing, the pipeline subcommands,
//! and the in-process `local` mode that hosts the parameter store and the
//! trainers in one process behind the same store surface as the networked
//! path.

use std::collections::HashMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use factorbird_core::client::{ClientConfig, ClientError, InProcessClient, ParamClient, ParameterStore};
use factorbird_core::dataprep::{self, PartitionManifest, SplitPaths, SplitRatios};
use factorbird_core::eval::{export_plot_data, holdout_rmse, FactorSource, LookupSource, RmseReport};
use factorbird_core::model::{HyperGrid, ModelLayout, V_KEY_DOMAIN};
use factorbird_core::server::{serve, ServerConfig};
use factorbird_core::store::{
    load_factor_matrix, load_global_bias, read_all_edges, ExportedFactors,
    FactorMatrixPartition, GraphStats,
};
use factorbird_core::trainer::{
    export_matrices, train, ExportPaths, PassReport, TrainerConfig,
};
use factorbird_core::VectorStore;

#[derive(Parser, Debug)]
#[command(
    name = "factorbird",
    version,
    about = "Distributed-style SGD matrix factorization at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split edges, compute graph statistics, and column-partition the
    /// training set.
    Prep(PrepArgs),
    /// Run a parameter server until killed.
    Serve(ServeArgs),
    /// Train against running parameter servers and export the model.
    Train(TrainArgs),
    /// Compute per-model hold-out RMSE from exported matrices.
    Eval(EvalArgs),
    /// Export 2-D factor coordinates for plotting (k = 2 models only).
    ExportPlot(PlotArgs),
    /// Run the server and trainers in-process: the whole pipeline stage
    /// with no sockets, deterministic with one thread.
    Local(LocalArgs),
}

#[derive(Args, Debug, Serialize)]
struct PrepArgs {
    /// Edge input: TSV `i<TAB>j<TAB>a[<TAB>w]` or FBED binary.
    #[arg(long)]
    input: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// train,validation,test fractions; must sum to 1.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    ratios: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Number of column partitions for the training set.
    #[arg(long, default_value_t = 1)]
    partitions: usize,
    /// Map every nonzero strength to 1.0.
    #[arg(long, default_value_t = false)]
    binarize: bool,
}

#[derive(Args, Debug, Serialize)]
struct ServeArgs {
    /// Address to bind, e.g. 127.0.0.1:7700 (port 0 picks one).
    #[arg(long)]
    bind: String,
    /// Vector width in slots: models * (k + 1).
    #[arg(long)]
    width: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 0.01)]
    stddev: f32,
    /// Slots per packed model (k + 1). Defaults to the full width, i.e. a
    /// single packed model; packed grids must pass the trainer's stride.
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Args, Debug, Serialize, Clone)]
struct TrainKnobs {
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    passes: u64,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    threads: u64,
    /// Synthetic negatives per positive edge (may be fractional).
    #[arg(long, default_value_t = 0.0)]
    negative_rate: f64,
    #[arg(long, default_value_t = 1.0)]
    negative_weight: f32,
    /// Block size for row-vector fetches.
    #[arg(long, default_value_t = 512, value_parser = clap::value_parser!(u64).range(1..=4096))]
    batch: u64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Stddev of random factor initialization.
    #[arg(long, default_value_t = 0.01)]
    stddev: f32,
}

#[derive(Args, Debug, Serialize, Clone)]
struct GridArgs {
    /// JSON grid file: a list of {eta0, lambda, decay, k[, variant]}.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Comma-separated learning rates; crossed with --lambdas.
    #[arg(long)]
    etas: Option<String>,
    /// Comma-separated regularization constants; crossed with --etas.
    #[arg(long)]
    lambdas: Option<String>,
    /// Per-pass learning-rate decay for crossed grids.
    #[arg(long, default_value_t = 1.0)]
    decay: f32,
    /// Rank for crossed grids.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Directory written by `prep`.
    #[arg(long)]
    prep: PathBuf,
    /// Which column partition this learner owns.
    #[arg(long, default_value_t = 0)]
    partition_index: usize,
    /// Parameter server addresses, comma separated; keys shard by hash.
    #[arg(long)]
    servers: String,
    /// Output directory for the exported model and reports.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    knobs: TrainKnobs,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    /// Hold-out edge file (validation.fbed or test.fbed from prep).
    #[arg(long)]
    edges: PathBuf,
    /// Which split the report describes.
    #[arg(long, value_parser = ["validation", "test"])]
    split: String,
    /// Model export directory (u.fbfm, v-part*.fbfm, g.json).
    #[arg(long)]
    model: PathBuf,
    /// Where to write the JSON report.
    #[arg(long)]
    report: PathBuf,
    /// Seed the run was initialized with; backs never-trained vertices.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 0.01)]
    stddev: f32,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Args, Debug, Serialize)]
struct PlotArgs {
    /// Model export directory.
    #[arg(long)]
    model: PathBuf,
    /// Packed model index to export.
    #[arg(long, default_value_t = 0)]
    model_index: usize,
    /// Comma-separated vertex ids to plot.
    #[arg(long)]
    ids: Option<String>,
    /// File with one vertex id per line.
    #[arg(long)]
    ids_file: Option<PathBuf>,
    /// Output TSV path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 0.01)]
    stddev: f32,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Args, Debug, Serialize)]
struct LocalArgs {
    /// Directory written by `prep`.
    #[arg(long)]
    prep: PathBuf,
    /// Output directory for the exported model and reports.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    knobs: TrainKnobs,
}

/// Parses argv and runs the selected command. Exit codes: 0 success, 1
/// usage error, 2 runtime error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("FACTORBIRD_LOG", "warn"),
    )
    .try_init()
    .ok();

    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    1
                }
            }
        }
    };

    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            // walk the cause chain, skipping causes a higher message
            // already embeds
            let mut text = e.to_string();
            for cause in e.chain().skip(1) {
                let cause = cause.to_string();
                if !text.contains(&cause) {
                    text.push_str(": ");
                    text.push_str(&cause);
                }
            }
            eprintln!("error: {text}");
            2
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prep(args) => cmd_prep(args),
        Command::Serve(args) => cmd_serve(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::ExportPlot(args) => cmd_export_plot(args),
        Command::Local(args) => cmd_local(args),
    }
}

fn parse_ratios(text: &str) -> Result<SplitRatios> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("cannot parse ratios {text:?}"))?;
    if parts.len() != 3 {
        bail!("ratios need exactly three values, got {}", parts.len());
    }
    Ok(SplitRatios::new(parts[0], parts[1], parts[2])?)
}

fn parse_f32_list(text: &str, what: &str) -> Result<Vec<f32>> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse::<f32>()
                .with_context(|| format!("cannot parse {what} entry {p:?}"))
        })
        .collect()
}

fn load_grid(args: &GridArgs) -> Result<HyperGrid> {
    match (&args.grid, &args.etas, &args.lambdas, args.k) {
        (Some(path), None, None, None) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading grid file {}", path.display()))?;
            let grid: HyperGrid = serde_json::from_str(&text)
                .with_context(|| format!("parsing grid file {}", path.display()))?;
            Ok(grid)
        }
        (None, Some(etas), Some(lambdas), Some(k)) => {
            let etas = parse_f32_list(etas, "--etas")?;
            let lambdas = parse_f32_list(lambdas, "--lambdas")?;
            Ok(HyperGrid::cross(&etas, &lambdas, args.decay, k)?)
        }
        _ => bail!("specify either --grid <file> or all of --etas, --lambdas and --k"),
    }
}

fn write_config_echo<T: Serialize>(dir: &Path, name: &str, args: &T, grid: Option<&HyperGrid>) -> Result<()> {
    #[derive(Serialize)]
    struct Echo<'a, T> {
        args: &'a T,
        resolved_grid: Option<&'a HyperGrid>,
    }
    let echo = Echo {
        args,
        resolved_grid: grid,
    };
    let json = serde_json::to_string_pretty(&echo)?;
    std::fs::write(dir.join(name), json + "\n")?;
    Ok(())
}

fn cmd_prep(args: PrepArgs) -> Result<()> {
    let ratios = parse_ratios(&args.ratios)?;
    std::fs::create_dir_all(&args.out)?;
    let splits = SplitPaths {
        train: args.out.join("train.fbed"),
        validation: args.out.join("validation.fbed"),
        test: args.out.join("test.fbed"),
    };
    let counts = dataprep::split(&args.input, ratios, args.seed, &splits, args.binarize)?;
    info!(
        "split: {} train / {} validation / {} test",
        counts.train, counts.validation, counts.test
    );
    let (stats, duplicates) = dataprep::compute_stats(&splits.train)?;
    if duplicates > 0 {
        log::warn!("dropped {duplicates} duplicate training edges");
    }
    stats.save(&args.out.join("stats.fbst"))?;
    dataprep::partition_by_column(&splits.train, args.partitions, args.seed, &args.out.join("parts"))?;
    write_config_echo(&args.out, "prep.config.json", &args, None)?;
    println!(
        "prep: {} train, {} validation, {} test edges across {} partition(s)",
        counts.train, counts.validation, counts.test, args.partitions
    );
    Ok(())
}

fn cmd_serve(args: ServeArgs) -> Result<()> {
    let stride = args.stride.unwrap_or(args.width);
    if stride < 2 || !args.width.is_multiple_of(stride) {
        bail!(
            "width {} is not a multiple of stride {} (stride must be k + 1 >= 2)",
            args.width,
            stride
        );
    }
    let layout = ModelLayout::new(stride - 1, args.width / stride);
    let handle = serve(&ServerConfig {
        bind: args.bind.clone(),
        layout,
        init_seed: args.seed,
        init_stddev: args.stddev,
    })?;
    println!("listening on {}", handle.local_addr());
    use std::io::Write;
    std::io::stdout().flush().ok();
    loop {
        std::thread::park();
    }
}

/// Sorted row ids observed in training; the rows exported after a run.
fn export_row_ids(stats: &GraphStats) -> Vec<u64> {
    let mut ids: Vec<u64> = stats.out_degree.keys().copied().collect();
    ids.sort_unstable();
    ids
}

fn load_prep(prep: &Path) -> Result<(GraphStats, Vec<PartitionManifest>)> {
    let stats = GraphStats::load(&prep.join("stats.fbst"))?;
    let manifests = dataprep::load_manifests(&prep.join("parts").join("manifest.json"))?;
    Ok((stats, manifests))
}

fn trainer_config(
    prep: &Path,
    manifest: &PartitionManifest,
    grid: &HyperGrid,
    knobs: &TrainKnobs,
) -> TrainerConfig {
    let mut config = TrainerConfig::new(
        prep.join("parts").join(&manifest.path),
        prep.join("stats.fbst"),
        grid.clone(),
        knobs.seed,
    );
    config.passes = knobs.passes as usize;
    config.threads = knobs.threads as usize;
    config.negative_rate = knobs.negative_rate;
    config.negative_weight = knobs.negative_weight;
    config.fetch_batch_size = knobs.batch as usize;
    config.init_stddev = knobs.stddev;
    config
}

fn write_reports(path: &Path, reports: &[PassReport]) -> Result<()> {
    let mut out = String::new();
    for report in reports {
        out.push_str(&serde_json::to_string(report)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn v_part_name(index: usize) -> String {
    format!("v-part{index:05}.fbfm")
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let grid = load_grid(&args.grid)?;
    let layout = grid.layout();
    let (stats, manifests) = load_prep(&args.prep)?;
    let manifest = manifests
        .iter()
        .find(|m| m.index == args.partition_index)
        .with_context(|| format!("no partition with index {}", args.partition_index))?;

    let servers: Vec<String> = args
        .servers
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if servers.is_empty() {
        bail!("--servers needs at least one address");
    }

    let config = trainer_config(&args.prep, manifest, &grid, &args.knobs);
    let partition = FactorMatrixPartition::allocate(&manifest.column_ids, layout.width())?;
    let width = layout.width();
    let factory = {
        let servers = servers.clone();
        let batch = (args.knobs.batch as usize).min(factorbird_core::protocol::MAX_BATCH);
        move || -> Result<Box<dyn ParameterStore>, ClientError> {
            let mut client_config = ClientConfig::new(servers.clone(), width);
            client_config.max_batch = batch;
            Ok(Box::new(ParamClient::connect(client_config)?) as Box<dyn ParameterStore>)
        }
    };

    let outcome = train(&config, partition, &factory)?;

    std::fs::create_dir_all(&args.out)?;
    let mut export_client = ParamClient::connect(ClientConfig::new(servers, width))?;
    let paths = ExportPaths {
        u: args.out.join("u.fbfm"),
        v: args.out.join(v_part_name(args.partition_index)),
        g: args.out.join("g.json"),
    };
    export_matrices(
        &outcome.local_v,
        &mut export_client,
        &export_row_ids(&stats),
        grid.num_models(),
        &paths,
    )?;
    write_reports(
        &args.out.join(format!("reports-part{:05}.jsonl", args.partition_index)),
        &outcome.reports,
    )?;
    write_config_echo(&args.out, "run.config.json", &args, Some(&grid))?;
    println!(
        "train: partition {} done, final mse {:.6}",
        args.partition_index,
        outcome.reports.last().map(|r| r.mse).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_local(args: LocalArgs) -> Result<()> {
    let grid = load_grid(&args.grid)?;
    run_local(&args.prep, &args.out, &grid, &args.knobs)?;
    write_config_echo(&args.out, "run.config.json", &args, Some(&grid))?;
    println!("local: run complete, outputs in {}", args.out.display());
    Ok(())
}

fn run_local(prep: &Path, out: &Path, grid: &HyperGrid, knobs: &TrainKnobs) -> Result<()> {
    let layout = grid.layout();
    let (stats, manifests) = load_prep(prep)?;
    std::fs::create_dir_all(out)?;

    // one shared in-process store plays the parameter machines
    let store = Arc::new(VectorStore::new(layout, knobs.seed, knobs.stddev));
    let batch = (knobs.batch as usize).min(factorbird_core::protocol::MAX_BATCH);
    let factory = {
        let store = Arc::clone(&store);
        move || -> Result<Box<dyn ParameterStore>, ClientError> {
            Ok(Box::new(InProcessClient::new(Arc::clone(&store)).with_max_batch(batch))
                as Box<dyn ParameterStore>)
        }
    };

    let mut trained_partitions = Vec::new();
    for manifest in &manifests {
        let config = trainer_config(prep, manifest, grid, knobs);
        let partition = FactorMatrixPartition::allocate(&manifest.column_ids, layout.width())?;
        let outcome = train(&config, partition, &factory)?;
        write_reports(
            &out.join(format!("reports-part{:05}.jsonl", manifest.index)),
            &outcome.reports,
        )?;
        trained_partitions.push((manifest.index, outcome.local_v));
    }

    // export every V partition, then U and g once, all from final state
    for (index, partition) in &trained_partitions {
        factorbird_core::store::save_factor_matrix(
            &out.join(v_part_name(*index)),
            partition.width(),
            partition.iter(),
        )?;
    }
    let mut export_client = InProcessClient::new(Arc::clone(&store));
    factorbird_core::trainer::export_rows_and_bias(
        &mut export_client,
        &export_row_ids(&stats),
        grid.num_models(),
        &out.join("u.fbfm"),
        &out.join("g.json"),
    )?;
    Ok(())
}

/// Loads and merges all V partition exports in a model directory.
fn load_v_exports(model_dir: &Path, width: usize) -> Result<ExportedFactors> {
    let mut merged = ExportedFactors {
        width,
        vectors: HashMap::new(),
    };
    let mut found = false;
    let mut names: Vec<PathBuf> = std::fs::read_dir(model_dir)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("v-part") && n.ends_with(".fbfm"))
        })
        .collect();
    names.sort();
    for path in names {
        found = true;
        let part = load_factor_matrix(&path)?;
        if part.width != width {
            bail!(
                "{} has width {}, expected {}",
                path.display(),
                part.width,
                width
            );
        }
        merged.vectors.extend(part.vectors);
    }
    if !found {
        bail!("no v-part*.fbfm files in {}", model_dir.display());
    }
    Ok(merged)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let grid = load_grid(&args.grid)?;
    let layout = grid.layout();
    let edges = read_all_edges(&args.edges)?;
    let u = load_factor_matrix(&args.model.join("u.fbfm"))?;
    if u.width != layout.width() {
        bail!("u.fbfm width {} does not match grid width {}", u.width, layout.width());
    }
    let v = load_v_exports(&args.model, layout.width())?;
    let g = load_global_bias(&args.model.join("g.json"))?;

    let mut u_source = LookupSource::new(&u, layout, args.seed, args.stddev, 0);
    let mut v_source = LookupSource::new(&v, layout, args.seed, args.stddev, V_KEY_DOMAIN);
    let rmse = holdout_rmse(&edges, &mut u_source, &mut v_source, &g, &grid)?;
    let report = RmseReport::build(
        &args.split,
        &edges,
        &grid,
        &rmse,
        u_source.fallbacks(),
        v_source.fallbacks(),
    );
    let json = serde_json::to_string_pretty(&report)?;
    std::fs::write(&args.report, json + "\n")?;
    if let Some(parent) = args.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        write_config_echo(parent, "eval.config.json", &args, Some(&grid))?;
    }
    for model in &report.models {
        let value = model
            .validation_rmse
            .or(model.test_rmse)
            .unwrap_or(f64::NAN);
        println!(
            "model {}: eta0={} lambda={} decay={} {}_rmse={:.6}",
            model.model_index, model.eta0, model.lambda, model.decay, args.split, value
        );
    }
    if let Some(best) = report.best_model_index {
        println!("best model: {best}");
    }
    Ok(())
}

fn parse_ids(args: &PlotArgs) -> Result<Vec<u64>> {
    match (&args.ids, &args.ids_file) {
        (Some(list), None) => list
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<u64>()
                    .with_context(|| format!("cannot parse id {p:?}"))
            })
            .collect(),
        (None, Some(path)) => std::fs::read_to_string(path)?
            .lines()
            .filter(|line| !line.trim().is_empty())
            .map(|line| {
                line.trim()
                    .parse::<u64>()
                    .with_context(|| format!("cannot parse id {line:?}"))
            })
            .collect(),
        _ => bail!("specify exactly one of --ids or --ids-file"),
    }
}

fn cmd_export_plot(args: PlotArgs) -> Result<()> {
    let grid = load_grid(&args.grid)?;
    let layout = grid.layout();
    let ids = parse_ids(&args)?;
    let v = load_v_exports(&args.model, layout.width())?;
    let mut v_source = LookupSource::new(&v, layout, args.seed, args.stddev, V_KEY_DOMAIN);
    export_plot_data(&mut v_source, &ids, args.model_index, &grid, &args.out)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        write_config_echo(parent, "plot.config.json", &args, Some(&grid))?;
    }
    println!("export-plot: wrote {} rows to {}", ids.len(), args.out.display());
    Ok(())
}
