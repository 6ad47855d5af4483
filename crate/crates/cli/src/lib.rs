//! Pipeline stages behind the `reside` binary.
//!
//! Every stage reads its inputs from files, writes its outputs plus a
//! `*.run.json` run manifest, and is deterministic given its flags.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use reside_core::aggregate::{self, TrainConfig, TrainReport, WeightVector};
use reside_core::clustering::{self, KMeansParams, ProbeParams, ProbeSet};
use reside_core::csf::{self, CsfKind, PNormConfig, ScoreMatrix};
use reside_core::feature_store::{self, FeatureDataset};
use reside_core::sc_eval::{self, BoundReport};
use reside_core::synthetic::{self, SyntheticKind, SyntheticSpec};
use reside_core::Exec;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug)]
pub enum CliError {
    /// Invalid flag combination; exit code 2.
    Usage(String),
    /// Unreadable, malformed or mismatched data; exit code 1.
    Data(anyhow::Error),
    /// A checked bound or invariant failed; exit code 3.
    Violation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Data(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Violation(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage error: {msg}"),
            CliError::Data(err) => write!(f, "{err:#}"),
            CliError::Violation(msg) => write!(f, "violation: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<anyhow::Error> for CliError {
    fn from(err: anyhow::Error) -> Self {
        CliError::Data(err)
    }
}

impl From<reside_core::Error> for CliError {
    fn from(err: reside_core::Error) -> Self {
        CliError::Data(err.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "reside", version, about = "Layerwise confidence scoring for selective binary classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit centroid probes on a training dataset
    Cluster(ClusterArgs),
    /// Build the layerwise score matrix of a dataset
    Score(ScoreArgs),
    /// Learn aggregation weights on validation scores
    Train(TrainArgs),
    /// Evaluate learned weights on test scores
    Eval(EvalArgs),
    /// Check the AURC upper bounds for a weight vector
    BoundCheck(BoundCheckArgs),
    /// Write a synthetic dataset
    GenSynthetic(GenSyntheticArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ClusterArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub k_min: usize,
    #[arg(long, default_value_t = 8)]
    pub k_max: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// k-means seedings per K; the best objective is kept
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
    #[arg(long, default_value_t = 2000)]
    pub silhouette_cap: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CsfArg {
    Msp,
    Sm,
    Ml,
    Lm,
    Ne,
    Ngi,
}

impl From<CsfArg> for CsfKind {
    fn from(arg: CsfArg) -> Self {
        match arg {
            CsfArg::Msp => CsfKind::Msp,
            CsfArg::Sm => CsfKind::Sm,
            CsfArg::Ml => CsfKind::Ml,
            CsfArg::Lm => CsfKind::Lm,
            CsfArg::Ne => CsfKind::Ne,
            CsfArg::Ngi => CsfKind::Ngi,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScoreArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub probes: PathBuf,
    #[arg(long, value_enum)]
    pub csf: CsfArg,
    /// Grid-search p on this (validation) dataset, e.g. `1,2,3,4`
    #[arg(long, value_delimiter = ',', num_args = 1.., conflicts_with_all = ["no_pnorm", "pnorm_p"])]
    pub pnorm_grid: Option<Vec<f64>>,
    /// Apply a fixed p, typically the one selected on validation
    #[arg(long, conflicts_with = "no_pnorm")]
    pub pnorm_p: Option<f64>,
    #[arg(long)]
    pub no_pnorm: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub val_scores: PathBuf,
    #[arg(long)]
    pub val_data: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Standardize score columns by their validation mean and std
    #[arg(long)]
    pub standardize: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub test_scores: PathBuf,
    #[arg(long)]
    pub test_data: PathBuf,
    /// Train report or a bare JSON array of weights
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub out_prefix: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BoundCheckArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    /// Also write the report (and a run manifest) here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpecArg {
    Separable,
    Pathological,
    PlantedK,
    Mixture,
}

impl From<SpecArg> for SyntheticKind {
    fn from(arg: SpecArg) -> Self {
        match arg {
            SpecArg::Separable => SyntheticKind::Separable,
            SpecArg::Pathological => SyntheticKind::Pathological,
            SpecArg::PlantedK => SyntheticKind::PlantedK,
            SpecArg::Mixture => SyntheticKind::Mixture,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenSyntheticArgs {
    #[arg(long, value_enum)]
    pub spec: SpecArg,
    #[arg(long)]
    pub m: usize,
    #[arg(long)]
    pub l: usize,
    #[arg(long, default_value_t = 1)]
    pub h: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long)]
    pub error_rate: Option<f64>,
    /// Planted cluster counts per layer (planted-k), repeated cyclically
    #[arg(long, value_delimiter = ',', default_value = "3")]
    pub k: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub version: String,
    pub duration_secs: f64,
}

struct Run {
    command: &'static str,
    config: serde_json::Value,
    seed: Option<u64>,
    started: Instant,
}

impl Run {
    fn start(command: &'static str, args: &impl Serialize, seed: Option<u64>) -> Self {
        Run {
            command,
            config: serde_json::to_value(args).unwrap_or(serde_json::Value::Null),
            seed,
            started: Instant::now(),
        }
    }

    fn finish(self, path: &Path, inputs: &[&Path], outputs: &[&Path]) -> CliResult<()> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            config: self.config,
            inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
            outputs: outputs.iter().map(|p| p.to_path_buf()).collect(),
            seed: self.seed,
            version: VERSION.to_string(),
            duration_secs: self.started.elapsed().as_secs_f64(),
        };
        write_json(path, &manifest)
    }
}

fn run_manifest_path(output: &Path) -> PathBuf {
    output.with_extension("run.json")
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let json = serde_json::to_vec_pretty(value).context("serializing output")?;
    fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load(dir: &Path) -> CliResult<FeatureDataset> {
    feature_store::load_dataset(dir)
        .with_context(|| format!("loading dataset {}", dir.display()))
        .map_err(CliError::Data)
}

fn load_scores(path: &Path, dataset: &FeatureDataset) -> CliResult<ScoreMatrix> {
    let scores = ScoreMatrix::read(path)
        .with_context(|| format!("reading scores {}", path.display()))?;
    if scores.rows() != dataset.sample_count() || scores.layer_count() != dataset.layer_count() {
        return Err(CliError::Data(anyhow::anyhow!(
            "score matrix is {} x {} but the dataset has M = {}, L = {}",
            scores.rows(),
            scores.columns(),
            dataset.sample_count(),
            dataset.layer_count()
        )));
    }
    Ok(scores)
}

/// Reads weights from a train report, or from a bare JSON array.
pub fn load_weights(path: &Path) -> CliResult<(WeightVector, Option<usize>)> {
    let raw = fs::read(path).with_context(|| format!("reading weights {}", path.display()))?;
    if let Ok(report) = serde_json::from_slice::<TrainReport>(&raw) {
        return Ok((report.weights, Some(report.best_layer)));
    }
    let values: Vec<f64> = serde_json::from_slice(&raw)
        .with_context(|| format!("{} is neither a train report nor a weight array", path.display()))?;
    Ok((WeightVector::new(values)?, None))
}

pub fn cmd_cluster(args: &ClusterArgs) -> CliResult<ProbeSet> {
    if args.k_min < 2 || args.k_min > args.k_max {
        return Err(CliError::Usage(format!(
            "need 2 <= --k-min <= --k-max, got [{}, {}]",
            args.k_min, args.k_max
        )));
    }
    let run = Run::start("cluster", args, Some(args.seed));
    let dataset = load(&args.train)?;
    let params = ProbeParams {
        k_min: args.k_min,
        k_max: args.k_max,
        seed: args.seed,
        kmeans: KMeansParams {
            max_iters: args.max_iters,
            tol: args.tol,
            restarts: args.restarts.max(1),
        },
        silhouette_cap: args.silhouette_cap,
        exec: Exec::Parallel,
    };
    let probes = clustering::build_probes(&dataset, &params)?;
    log::info!("K per layer: {:?}", probes.ks());
    probes.write(&args.out)?;
    run.finish(&run_manifest_path(&args.out), &[&args.train], &[&args.out])?;
    Ok(probes)
}

pub fn cmd_score(args: &ScoreArgs) -> CliResult<ScoreMatrix> {
    let run = Run::start("score", args, None);
    let dataset = load(&args.data)?;
    let probes = ProbeSet::read(&args.probes)
        .with_context(|| format!("reading probes {}", args.probes.display()))?;
    let kind = CsfKind::from(args.csf);
    let pnorm = if args.no_pnorm {
        PNormConfig::identity()
    } else if let Some(p) = args.pnorm_p {
        if p.is_nan() || p <= 0.0 {
            return Err(CliError::Usage(format!("--pnorm-p must be positive, got {p}")));
        }
        PNormConfig::with_p(p)
    } else if let Some(grid) = &args.pnorm_grid {
        if grid.iter().any(|p| p.is_nan() || *p <= 0.0) {
            return Err(CliError::Usage("--pnorm-grid values must be positive".into()));
        }
        let flags = feature_store::derive_correctness(&dataset);
        let masses = feature_store::compute_masses(&dataset);
        let logits = dataset.final_logits().mapv(|v| v as f64);
        let search = csf::grid_search_p(logits.view(), grid, kind, &masses, &flags)?;
        log::info!("pNorm selection: {:?}", search.config);
        search.config
    } else {
        PNormConfig::identity()
    };
    let matrix = csf::build_score_matrix(&dataset, &probes, kind, pnorm, Exec::Parallel)?;
    matrix.write(&args.out)?;
    let header = ScoreMatrix::header_path(&args.out);
    run.finish(
        &run_manifest_path(&args.out),
        &[&args.data, &args.probes],
        &[&args.out, &header],
    )?;
    Ok(matrix)
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<TrainReport> {
    let run = Run::start("train", args, Some(args.seed));
    let dataset = load(&args.val_data)?;
    let scores = load_scores(&args.val_scores, &dataset)?;
    let flags = feature_store::derive_correctness(&dataset);
    let masses = feature_store::compute_masses(&dataset);
    let config = TrainConfig {
        learning_rate: args.lr,
        batch_size: args.batch,
        epochs: args.epochs,
        seed: args.seed,
        standardize_scores: args.standardize,
        ..TrainConfig::default()
    };
    if config.learning_rate.is_nan() || config.learning_rate <= 0.0 || config.batch_size == 0 {
        return Err(CliError::Usage("--lr and --batch must be positive".into()));
    }
    let report = aggregate::optimize_weights(&scores, &masses, &flags, &config)?;
    if report.degenerate {
        log::warn!("degenerate validation split; weights fall back to the final logits");
    }
    log::info!(
        "best epoch {} with validation AURC {:.6} (best single layer {} at {:.6})",
        report.best_epoch,
        report.best_aurc,
        report.best_layer,
        report.best_layer_aurc
    );
    report.write(&args.out)?;
    run.finish(
        &run_manifest_path(&args.out),
        &[&args.val_scores, &args.val_data],
        &[&args.out],
    )?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub aurc_reside: f64,
    pub aurc_baseline: f64,
    pub aurc_best_layer: f64,
    pub best_layer: usize,
    pub delta_percent: f64,
    pub error_rate: f64,
    #[serde(rename = "M")]
    pub samples: usize,
    #[serde(rename = "L")]
    pub layers: usize,
}

/// Relative AURC reduction of `reside` against `baseline`, in percent.
pub fn delta_percent(baseline: f64, reside: f64) -> f64 {
    if baseline > 0.0 {
        (baseline - reside) / baseline * 100.0
    } else {
        0.0
    }
}

fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<EvalMetrics> {
    let run = Run::start("eval", args, None);
    let dataset = load(&args.test_data)?;
    let scores = load_scores(&args.test_scores, &dataset)?;
    let (weights, best_layer) = load_weights(&args.weights)?;
    let flags = feature_store::derive_correctness(&dataset);
    let masses = feature_store::compute_masses(&dataset);

    let g = aggregate::aggregate_scores(&weights, &scores)?;
    let reside = sc_eval::rc_curve(&g, flags.errors(), &masses)?;
    let baseline = sc_eval::rc_curve(&scores.baseline_column(), flags.errors(), &masses)?;
    let best_layer = match best_layer {
        Some(l) if (1..=scores.columns()).contains(&l) => l,
        Some(l) => {
            return Err(CliError::Data(anyhow::anyhow!(
                "weights name best layer {l} outside [1, {}]",
                scores.columns()
            )))
        }
        None => aggregate::best_layer(&scores, &masses, &flags)?,
    };
    let aurc_best_layer =
        sc_eval::aurc(&scores.column(best_layer - 1), flags.errors(), &masses)?;

    let metrics = EvalMetrics {
        aurc_reside: reside.aurc,
        aurc_baseline: baseline.aurc,
        aurc_best_layer,
        best_layer,
        delta_percent: delta_percent(baseline.aurc, reside.aurc),
        error_rate: flags.error_rate(&masses),
        samples: scores.rows(),
        layers: scores.layer_count(),
    };

    let rc_path = suffixed(&args.out_prefix, ".rc.csv");
    let baseline_path = suffixed(&args.out_prefix, ".baseline.rc.csv");
    let metrics_path = suffixed(&args.out_prefix, ".metrics.json");
    for (curve, path) in [(&reside, &rc_path), (&baseline, &baseline_path)] {
        let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        curve
            .write_csv(std::io::BufWriter::new(file))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    write_json(&metrics_path, &metrics)?;
    log::info!(
        "AURC {:.6} vs baseline {:.6} ({:.2}% reduction)",
        metrics.aurc_reside,
        metrics.aurc_baseline,
        metrics.delta_percent
    );
    run.finish(
        &suffixed(&args.out_prefix, ".run.json"),
        &[&args.test_scores, &args.test_data, &args.weights],
        &[&rc_path, &baseline_path, &metrics_path],
    )?;
    Ok(metrics)
}

/// Returns `None` when the data has no wrong or no correct samples.
pub fn cmd_bound_check(args: &BoundCheckArgs) -> CliResult<Option<BoundReport>> {
    let run = Run::start("bound-check", args, None);
    let dataset = load(&args.data)?;
    let scores = load_scores(&args.scores, &dataset)?;
    let (weights, _) = load_weights(&args.weights)?;
    let flags = feature_store::derive_correctness(&dataset);
    let masses = feature_store::compute_masses(&dataset);
    let n = flags.error_count();
    if n == 0 || n == flags.len() {
        println!(
            "bound check skipped: {n} of {} samples are misclassified, the bounds need both kinds",
            flags.len()
        );
        return Ok(None);
    }
    let report = sc_eval::weighted_bound_report(&scores, &weights, &masses, &flags)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).context("serializing report")?
    );
    if let Some(out) = &args.out {
        write_json(out, &report)?;
        run.finish(
            &run_manifest_path(out),
            &[&args.scores, &args.data, &args.weights],
            &[out],
        )?;
    }
    if !report.holds() {
        return Err(CliError::Violation(format!(
            "AURC {} exceeds a bound (loose {}, tight {})",
            report.aurc, report.loose_bound, report.tight_bound
        )));
    }
    Ok(Some(report))
}

pub fn cmd_gen_synthetic(args: &GenSyntheticArgs) -> CliResult<FeatureDataset> {
    let run = Run::start("gen-synthetic", args, Some(args.seed));
    let spec = SyntheticSpec {
        kind: args.spec.into(),
        samples: args.m,
        layers: args.l,
        subsets: args.h,
        seed: args.seed,
        dim: args.dim,
        error_rate: args.error_rate,
        ks: args.k.clone(),
    };
    let dataset = synthetic::generate(&spec).map_err(|e| CliError::Usage(e.to_string()))?;
    feature_store::write_dataset(&dataset, &args.out)?;
    run.finish(&args.out.join("run.json"), &[], &[&args.out])?;
    Ok(dataset)
}

pub fn run(command: &Command) -> CliResult<()> {
    match command {
        Command::Cluster(args) => cmd_cluster(args).map(drop),
        Command::Score(args) => cmd_score(args).map(drop),
        Command::Train(args) => cmd_train(args).map(drop),
        Command::Eval(args) => cmd_eval(args).map(drop),
        Command::BoundCheck(args) => cmd_bound_check(args).map(drop),
        Command::GenSynthetic(args) => cmd_gen_synthetic(args).map(drop),
    }
}
