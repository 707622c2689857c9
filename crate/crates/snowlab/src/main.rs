//! Batch experiment runner for the snowflake-metrics library.
//!
//! Subcommands: `table2` (the synthetic metric-learning grid), `verify`
//! (named numeric suites), `latent-graph` (node-classification harness),
//! and `embed` (one-shot snowflaked embedding of a graph file).
//!
//! Results land in `--out-dir`, or `$SNOWLAB_RESULTS`, or `./results`.
//! Every output embeds the hash of its run manifest; re-running the same
//! configuration reproduces the files byte for byte. Exit codes: 0
//! success, 1 configuration error, 2 suite failure, 3 numeric failure.

mod manifest;

use clap::{Args, Parser, Subcommand};
use manifest::RunManifest;
use serde::{Deserialize, Serialize};
use snowflake_metrics::embed::{critical_exponent, schoenberg_embed, Embedding};
use snowflake_metrics::graph::{geodesic_distances, MetricId, WeightedGraph};
use snowflake_metrics::latent::{run_latent_graph_experiment, LatentGraphConfig, SimilaritySpace};
use snowflake_metrics::suites;
use snowflake_metrics::train::{run_experiment, ExperimentConfig, ExperimentReport, ModelKind};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "snowlab", version, about)]
struct Cli {
    /// Results directory (falls back to $SNOWLAB_RESULTS, then ./results)
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for independent runs (default: all cores)
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the synthetic metric-learning grid (metrics x model kinds)
    Table2(Table2Args),
    /// Run a named verification suite
    Verify {
        /// One of: metric-axioms, thm1-universality, gradients
        suite: String,
    },
    /// Run the latent-graph node-classification harness
    LatentGraph(LatentArgs),
    /// Embed a graph file at a snowflake exponent
    Embed(EmbedArgs),
}

#[derive(Args)]
struct Table2Args {
    /// JSON config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated metric filter, e.g. M1,M3
    #[arg(long, value_delimiter = ',')]
    metrics: Option<Vec<String>>,
    /// Comma-separated model filter, e.g. snowflake_direct
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
    /// Use the published 4M-pair training scale
    #[arg(long)]
    published_scale: bool,
    #[arg(long)]
    train_pairs: Option<usize>,
    #[arg(long)]
    test_pairs: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct LatentArgs {
    /// JSON config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated similarity spaces,
    /// e.g. euclidean,snowflake_activation,neural_snowflake
    #[arg(long, value_delimiter = ',')]
    similarity: Option<Vec<String>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    splits: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated explicit per-split seeds, e.g. 1,2,3
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Args)]
struct EmbedArgs {
    /// Graph JSON file: {coords, edges, weights}
    #[arg(long)]
    graph: PathBuf,
    /// Snowflake exponent; defaults to the critical exponent of the
    /// graph's node count
    #[arg(long)]
    epsilon: Option<f64>,
}

/// Process exit codes, per the interface contract.
enum Outcome {
    Success,
    ConfigError(String),
    SuiteFailure(String),
    NumericFailure(String),
}

impl Outcome {
    fn exit(self) -> ! {
        match self {
            Outcome::Success => std::process::exit(0),
            Outcome::ConfigError(msg) => {
                eprintln!("configuration error: {msg}");
                std::process::exit(1);
            }
            Outcome::SuiteFailure(msg) => {
                eprintln!("suite failure: {msg}");
                std::process::exit(2);
            }
            Outcome::NumericFailure(msg) => {
                eprintln!("numeric failure: {msg}");
                std::process::exit(3);
            }
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let out_dir = cli
        .out_dir
        .clone()
        .or_else(|| std::env::var_os("SNOWLAB_RESULTS").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"));

    if let Some(workers) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
        {
            Outcome::ConfigError(format!("worker pool: {e}")).exit();
        }
    }

    let outcome = match &cli.command {
        Command::Table2(args) => cmd_table2(args, &out_dir),
        Command::Verify { suite } => cmd_verify(suite),
        Command::LatentGraph(args) => cmd_latent_graph(args, &out_dir),
        Command::Embed(args) => cmd_embed(args, &out_dir),
    };
    outcome.exit()
}

// ---------------------------------------------------------------- table2

/// Resolved configuration of a table2 invocation. Serialized into the
/// manifest hash, so any change to it changes every output's stamp.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct Table2Config {
    metrics: Vec<String>,
    models: Vec<String>,
    ambient_dim: usize,
    embed_dim: usize,
    train_pairs: usize,
    test_pairs: usize,
    batch: usize,
    epochs: usize,
    lr_main: f64,
    lr_p: f64,
    seed: u64,
}

impl Default for Table2Config {
    fn default() -> Self {
        let base = ExperimentConfig::desk_scale(MetricId::M1, ModelKind::MlpOnly, 42);
        Self {
            metrics: MetricId::ALL.iter().map(|m| m.to_string()).collect(),
            models: ModelKind::ALL.iter().map(|m| m.to_string()).collect(),
            ambient_dim: base.ambient_dim,
            embed_dim: base.embed_dim,
            train_pairs: base.train_pairs,
            test_pairs: base.test_pairs,
            batch: base.batch,
            epochs: base.epochs,
            lr_main: base.lr_main,
            lr_p: base.lr_p,
            seed: base.seed,
        }
    }
}

fn load_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("cannot parse {}: {e}", path.display()))
}

/// One canonical JSON line with the manifest hash up front.
fn jsonl_line<T: Serialize>(hash: &str, value: &T) -> String {
    let body = serde_json::to_value(value).expect("serializable");
    let mut obj = serde_json::Map::new();
    obj.insert("manifest_hash".into(), serde_json::Value::String(hash.into()));
    if let serde_json::Value::Object(fields) = body {
        obj.extend(fields);
    }
    let mut line = serde_json::Value::Object(obj).to_string();
    line.push('\n');
    line
}

fn cmd_table2(args: &Table2Args, out_dir: &Path) -> Outcome {
    let mut config: Table2Config = match &args.config {
        Some(path) => match load_config(path) {
            Ok(c) => c,
            Err(e) => return Outcome::ConfigError(e),
        },
        None => Table2Config::default(),
    };
    if let Some(metrics) = &args.metrics {
        config.metrics = metrics.clone();
    }
    if let Some(models) = &args.models {
        config.models = models.clone();
    }
    if args.published_scale {
        config.train_pairs = 4_000_000;
    }
    if let Some(v) = args.train_pairs {
        config.train_pairs = v;
    }
    if let Some(v) = args.test_pairs {
        config.test_pairs = v;
    }
    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }

    let metrics: Vec<MetricId> = match config.metrics.iter().map(|s| s.parse()).collect() {
        Ok(m) => m,
        Err(e) => return Outcome::ConfigError(format!("{e}")),
    };
    let models: Vec<ModelKind> = match config.models.iter().map(|s| s.parse()).collect() {
        Ok(m) => m,
        Err(e) => return Outcome::ConfigError(e),
    };
    if metrics.is_empty() || models.is_empty() {
        return Outcome::ConfigError("empty metric or model selection".into());
    }

    let resolved = serde_json::to_string(&config).expect("config serializes");
    let mut manifest = RunManifest::new(
        "table2",
        args.config.as_deref(),
        &resolved,
        config.seed,
    );

    let runs: Vec<ExperimentConfig> = metrics
        .iter()
        .flat_map(|&metric| {
            let config = &config;
            models.iter().map(move |&model| ExperimentConfig {
                metric,
                model,
                ambient_dim: config.ambient_dim,
                embed_dim: config.embed_dim,
                train_pairs: config.train_pairs,
                test_pairs: config.test_pairs,
                batch: config.batch,
                epochs: config.epochs,
                lr_main: config.lr_main,
                lr_p: config.lr_p,
                ..ExperimentConfig::desk_scale(metric, model, config.seed)
            })
        })
        .collect();

    eprintln!("table2: {} runs over {} metrics x {} models", runs.len(), metrics.len(), models.len());
    let results: Vec<Result<ExperimentReport, String>> = {
        use rayon::prelude::*;
        runs.par_iter()
            .map(|cfg| run_experiment(cfg).map_err(|e| e.to_string()))
            .collect()
    };
    let mut reports = Vec::with_capacity(results.len());
    for result in results {
        match result {
            Ok(report) => {
                eprintln!(
                    "  {}/{}: train {:.6e}, test {:.6e} ({:.1}s)",
                    report.config.metric,
                    report.config.model,
                    report.train_mse,
                    report.test_mse,
                    report.wall_time_secs
                );
                reports.push(report);
            }
            Err(e) => return Outcome::NumericFailure(e),
        }
    }

    if let Err(e) = std::fs::create_dir_all(out_dir) {
        return Outcome::ConfigError(format!("cannot create {}: {e}", out_dir.display()));
    }

    // JSON-lines results, one line per run
    let mut jsonl = String::new();
    for report in &reports {
        jsonl.push_str(&jsonl_line(&manifest.config_hash, report));
    }
    manifest.record("results.jsonl");
    if let Err(e) = std::fs::write(out_dir.join("results.jsonl"), jsonl) {
        return Outcome::ConfigError(format!("write results.jsonl: {e}"));
    }

    // grid CSV: metric rows x model columns of test MSE
    let mut grid = manifest.csv_header();
    let _ = write!(grid, "metric");
    for model in &models {
        let _ = write!(grid, ",{model}");
    }
    grid.push('\n');
    for &metric in &metrics {
        let _ = write!(grid, "{metric}");
        for &model in &models {
            let report = reports
                .iter()
                .find(|r| r.config.metric == metric && r.config.model == model)
                .expect("every cell ran");
            let _ = write!(grid, ",{}", report.test_mse);
        }
        grid.push('\n');
    }
    manifest.record("grid.csv");
    if let Err(e) = std::fs::write(out_dir.join("grid.csv"), grid) {
        return Outcome::ConfigError(format!("write grid.csv: {e}"));
    }

    // one loss trace per run
    for report in &reports {
        let name = format!("loss_{}_{}.csv", report.config.metric, report.config.model);
        let mut csv = manifest.csv_header();
        csv.push_str("epoch,mean_loss\n");
        for (epoch, loss) in report.epoch_losses.iter().enumerate() {
            let _ = writeln!(csv, "{epoch},{loss}");
        }
        manifest.record(&name);
        if let Err(e) = std::fs::write(out_dir.join(&name), csv) {
            return Outcome::ConfigError(format!("write {name}: {e}"));
        }
    }

    if let Err(e) = manifest.write(out_dir) {
        return Outcome::ConfigError(format!("write manifest: {e}"));
    }
    eprintln!("table2: wrote {} files to {}", manifest.outputs.len() + 1, out_dir.display());
    Outcome::Success
}

// ---------------------------------------------------------------- verify

fn cmd_verify(suite: &str) -> Outcome {
    let results = match suites::run_suite(suite) {
        Ok(r) => r,
        Err(e) => return Outcome::ConfigError(e.to_string()),
    };
    let mut all_passed = true;
    for check in &results {
        println!("{}", serde_json::to_string(check).expect("serializable"));
        all_passed &= check.passed;
    }
    if all_passed {
        Outcome::Success
    } else {
        Outcome::SuiteFailure(format!("suite {suite} has failing checks"))
    }
}

// ---------------------------------------------------------- latent-graph

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct LatentCliConfig {
    similarity_spaces: Vec<String>,
    nodes: usize,
    classes: usize,
    ambient_dim: usize,
    latent_dim: usize,
    k: usize,
    encoder_hidden: usize,
    gcn_hidden: usize,
    epochs: usize,
    splits: usize,
    train_fraction: f64,
    lr_main: f64,
    lr_p: f64,
    center_scale: f64,
    noise_scale: f64,
    l_gl_into_encoder: bool,
    seed: u64,
    seeds: Option<Vec<u64>>,
}

impl Default for LatentCliConfig {
    fn default() -> Self {
        let base = LatentGraphConfig::desk_scale(SimilaritySpace::Euclidean, 42);
        Self {
            similarity_spaces: vec![
                "euclidean".into(),
                "snowflake_activation".into(),
                "neural_snowflake".into(),
            ],
            nodes: base.nodes,
            classes: base.classes,
            ambient_dim: base.ambient_dim,
            latent_dim: base.latent_dim,
            k: base.k,
            encoder_hidden: base.encoder_hidden,
            gcn_hidden: base.gcn_hidden,
            epochs: base.epochs,
            splits: base.splits,
            train_fraction: base.train_fraction,
            lr_main: base.lr_main,
            lr_p: base.lr_p,
            center_scale: base.center_scale,
            noise_scale: base.noise_scale,
            l_gl_into_encoder: base.l_gl_into_encoder,
            seed: base.seed,
            seeds: None,
        }
    }
}

fn cmd_latent_graph(args: &LatentArgs, out_dir: &Path) -> Outcome {
    let mut config: LatentCliConfig = match &args.config {
        Some(path) => match load_config(path) {
            Ok(c) => c,
            Err(e) => return Outcome::ConfigError(e),
        },
        None => LatentCliConfig::default(),
    };
    if let Some(spaces) = &args.similarity {
        config.similarity_spaces = spaces.clone();
    }
    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    if let Some(v) = args.splits {
        config.splits = v;
    }
    if let Some(v) = args.k {
        config.k = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = &args.seeds {
        config.seeds = Some(v.clone());
    }

    let spaces: Vec<SimilaritySpace> =
        match config.similarity_spaces.iter().map(|s| s.parse()).collect() {
            Ok(s) => s,
            Err(e) => return Outcome::ConfigError(e),
        };
    if spaces.is_empty() {
        return Outcome::ConfigError("empty similarity selection".into());
    }

    let resolved = serde_json::to_string(&config).expect("config serializes");
    let mut manifest = RunManifest::new(
        "latent-graph",
        args.config.as_deref(),
        &resolved,
        config.seed,
    );

    let mut jsonl = String::new();
    for &space in &spaces {
        let cfg = LatentGraphConfig {
            similarity: space,
            nodes: config.nodes,
            classes: config.classes,
            ambient_dim: config.ambient_dim,
            latent_dim: config.latent_dim,
            k: config.k,
            encoder_hidden: config.encoder_hidden,
            gcn_hidden: config.gcn_hidden,
            epochs: config.epochs,
            splits: config.splits,
            train_fraction: config.train_fraction,
            lr_main: config.lr_main,
            lr_p: config.lr_p,
            center_scale: config.center_scale,
            noise_scale: config.noise_scale,
            l_gl_into_encoder: config.l_gl_into_encoder,
            seed: config.seed,
            seeds: config.seeds.clone(),
        };
        match run_latent_graph_experiment(&cfg) {
            Ok(report) => {
                eprintln!(
                    "  {space}: accuracy {:.4} +/- {:.4} over {} splits",
                    report.accuracy_mean,
                    report.accuracy_std,
                    report.per_split_accuracy.len()
                );
                jsonl.push_str(&jsonl_line(&manifest.config_hash, &report));
            }
            Err(e) => return Outcome::NumericFailure(e.to_string()),
        }
    }

    if let Err(e) = std::fs::create_dir_all(out_dir) {
        return Outcome::ConfigError(format!("cannot create {}: {e}", out_dir.display()));
    }
    manifest.record("latent_results.jsonl");
    if let Err(e) = std::fs::write(out_dir.join("latent_results.jsonl"), jsonl) {
        return Outcome::ConfigError(format!("write latent_results.jsonl: {e}"));
    }
    if let Err(e) = manifest.write(out_dir) {
        return Outcome::ConfigError(format!("write manifest: {e}"));
    }
    Outcome::Success
}

// ----------------------------------------------------------------- embed

#[derive(Serialize)]
struct EmbedOutput<'a> {
    manifest_hash: &'a str,
    epsilon: f64,
    feasible: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    min_eigenvalue: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    embedding_dim: Option<usize>,
}

fn cmd_embed(args: &EmbedArgs, out_dir: &Path) -> Outcome {
    let graph: WeightedGraph = match load_config(&args.graph) {
        Ok(g) => g,
        Err(e) => return Outcome::ConfigError(e),
    };
    let geodesics = match geodesic_distances(&graph) {
        Ok(d) => d,
        Err(e) => return Outcome::ConfigError(e.to_string()),
    };
    let epsilon = match args.epsilon {
        Some(e) => e,
        None => match critical_exponent(graph.node_count(), false) {
            Ok(e) => e,
            Err(e) => return Outcome::ConfigError(e.to_string()),
        },
    };

    let resolved = format!(
        "{{\"graph\":{},\"epsilon\":{}}}",
        serde_json::to_string(&graph).expect("graph serializes"),
        epsilon
    );
    let mut manifest = RunManifest::new("embed", Some(&args.graph), &resolved, 0);

    let embedding = match schoenberg_embed(&geodesics, epsilon) {
        Ok(e) => e,
        Err(e) => return Outcome::ConfigError(e.to_string()),
    };

    if let Err(e) = std::fs::create_dir_all(out_dir) {
        return Outcome::ConfigError(format!("cannot create {}: {e}", out_dir.display()));
    }

    let (output, coords) = match &embedding {
        Embedding::Feasible(result) => (
            EmbedOutput {
                manifest_hash: &manifest.config_hash,
                epsilon,
                feasible: true,
                min_eigenvalue: Some(result.min_eigenvalue),
                residual: Some(result.residual),
                embedding_dim: Some(result.coords.first().map_or(0, |c| c.len())),
            },
            Some(&result.coords),
        ),
        Embedding::Infeasible { min_eigenvalue, .. } => (
            EmbedOutput {
                manifest_hash: &manifest.config_hash,
                epsilon,
                feasible: false,
                min_eigenvalue: Some(*min_eigenvalue),
                residual: None,
                embedding_dim: None,
            },
            None,
        ),
    };

    let mut json = serde_json::to_string_pretty(&output).expect("serializable");
    json.push('\n');
    manifest.record("embedding.json");
    if let Err(e) = std::fs::write(out_dir.join("embedding.json"), json) {
        return Outcome::ConfigError(format!("write embedding.json: {e}"));
    }

    if let Some(coords) = coords {
        let mut csv = manifest.csv_header();
        csv.push_str("node");
        let dim = coords.first().map_or(0, |c| c.len());
        for d in 0..dim {
            let _ = write!(csv, ",x{d}");
        }
        csv.push('\n');
        for (i, point) in coords.iter().enumerate() {
            let _ = write!(csv, "{i}");
            for v in point {
                let _ = write!(csv, ",{v}");
            }
            csv.push('\n');
        }
        manifest.record("coords.csv");
        if let Err(e) = std::fs::write(out_dir.join("coords.csv"), csv) {
            return Outcome::ConfigError(format!("write coords.csv: {e}"));
        }
        eprintln!("embed: feasible at epsilon {epsilon}");
    } else {
        eprintln!("embed: infeasible at epsilon {epsilon}");
    }

    if let Err(e) = manifest.write(out_dir) {
        return Outcome::ConfigError(format!("write manifest: {e}"));
    }
    Outcome::Success
}
