//! Command-line front end: flat TOML experiment configs, the `run` /
//! `sweep` / `sizes` / `partition-stats` subcommands, CSV and aligned
//! markdown emitters, and the 0/1/2 exit-code contract (0 success,
//! 1 runtime failure, 2 bad usage or config).
//!
//! Log verbosity comes from the `FSQZ_LOG` environment variable
//! (error/warn/info/debug/trace, default warn).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{estimate_size, measure_payload, Payload, SizeKind};
use crate::compress::global_magnitude_prune;
use crate::data::{lda_partition, mean_label_tv, partition_stats};
use crate::error::{Error, Result};
use crate::fl::{
    join_experiment, run_experiment, serve_experiment, DatasetConfig, ExperimentConfig,
    ExperimentOutput, RoundMetrics, TransportKind,
};

/// The exact column header every metrics.csv starts with; tests pin it.
pub const METRICS_HEADER: &str =
    "round,accuracy,train_loss,uplink_raw_B,uplink_deflated_B,downlink_raw_B,downlink_deflated_B,sparsity";

const MIB: f64 = (1u64 << 20) as f64;

/// Flat key-value experiment file. Every key mirrors one
/// [`ExperimentConfig`] field; only `rounds` is required, everything else
/// has the desk-scale default. Unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub rounds: u32,
    #[serde(default = "d_layer_sizes")]
    pub layer_sizes: Vec<usize>,
    #[serde(default = "d_dataset")]
    pub dataset: String,
    #[serde(default = "d_num_classes")]
    pub num_classes: usize,
    #[serde(default = "d_dim")]
    pub dim: usize,
    #[serde(default = "d_train_per_class")]
    pub train_per_class: usize,
    #[serde(default = "d_test_per_class")]
    pub test_per_class: usize,
    #[serde(default = "d_spread")]
    pub spread: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
    #[serde(default = "d_num_clients")]
    pub num_clients: usize,
    #[serde(default = "d_participation")]
    pub participation: f64,
    #[serde(default = "d_local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub prune_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub server_prune_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_prune_rate: Option<f64>,
    #[serde(default = "d_true")]
    pub prune_biases: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant_bits: Option<u8>,
    #[serde(default)]
    pub combined: bool,
    #[serde(default = "d_true")]
    pub deflate: bool,
    #[serde(default = "d_learning_rate")]
    pub learning_rate: f32,
    #[serde(default = "d_momentum")]
    pub momentum: f32,
    #[serde(default = "d_transport")]
    pub transport: String,
    #[serde(default = "d_seed")]
    pub seed: u64,
}

fn d_layer_sizes() -> Vec<usize> {
    vec![32, 64, 10]
}
fn d_dataset() -> String {
    "blobs".into()
}
fn d_num_classes() -> usize {
    10
}
fn d_dim() -> usize {
    32
}
fn d_train_per_class() -> usize {
    500
}
fn d_test_per_class() -> usize {
    100
}
fn d_spread() -> f64 {
    0.8
}
fn d_num_clients() -> usize {
    10
}
fn d_participation() -> f64 {
    0.4
}
fn d_local_epochs() -> usize {
    1
}
fn d_batch_size() -> usize {
    32
}
fn d_alpha() -> f64 {
    100.0
}
fn d_true() -> bool {
    true
}
fn d_learning_rate() -> f32 {
    0.05
}
fn d_momentum() -> f32 {
    0.9
}
fn d_transport() -> String {
    "inproc".into()
}
fn d_seed() -> u64 {
    42
}

impl FileConfig {
    /// Parses a TOML config file; parse problems name the offending key.
    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Resolves the file into a validated runtime configuration.
    pub fn build(&self) -> Result<ExperimentConfig> {
        let dataset = match self.dataset.as_str() {
            "blobs" => DatasetConfig::Blobs {
                num_classes: self.num_classes,
                dim: self.dim,
                train_per_class: self.train_per_class,
                test_per_class: self.test_per_class,
                spread: self.spread,
            },
            "idx" => {
                let path = |p: &Option<PathBuf>, key: &str| {
                    p.clone()
                        .ok_or_else(|| Error::Config(format!("dataset = \"idx\" requires {key}")))
                };
                DatasetConfig::Idx {
                    train_images: path(&self.train_images, "train_images")?,
                    train_labels: path(&self.train_labels, "train_labels")?,
                    test_images: path(&self.test_images, "test_images")?,
                    test_labels: path(&self.test_labels, "test_labels")?,
                    num_classes: self.num_classes,
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "dataset must be \"blobs\" or \"idx\", got \"{other}\""
                )))
            }
        };
        let cfg = ExperimentConfig {
            layer_sizes: self.layer_sizes.clone(),
            dataset,
            num_clients: self.num_clients,
            participation: self.participation,
            rounds: self.rounds,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            alpha: self.alpha,
            prune_rate: self.prune_rate,
            server_prune_rate: self.server_prune_rate,
            client_prune_rate: self.client_prune_rate,
            prune_biases: self.prune_biases,
            quant_bits: self.quant_bits,
            combined: self.combined,
            deflate: self.deflate,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            transport: parse_transport(&self.transport)?,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Snapshot of a runtime configuration, for the manifest. Re-parsing
    /// the snapshot builds an identical configuration.
    pub fn from_experiment(cfg: &ExperimentConfig) -> FileConfig {
        let mut file = FileConfig {
            rounds: cfg.rounds,
            layer_sizes: cfg.layer_sizes.clone(),
            dataset: "blobs".into(),
            num_classes: 0,
            dim: 0,
            train_per_class: 0,
            test_per_class: 0,
            spread: 0.0,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            num_clients: cfg.num_clients,
            participation: cfg.participation,
            local_epochs: cfg.local_epochs,
            batch_size: cfg.batch_size,
            alpha: cfg.alpha,
            prune_rate: cfg.prune_rate,
            server_prune_rate: cfg.server_prune_rate,
            client_prune_rate: cfg.client_prune_rate,
            prune_biases: cfg.prune_biases,
            quant_bits: cfg.quant_bits,
            combined: cfg.combined,
            deflate: cfg.deflate,
            learning_rate: cfg.learning_rate,
            momentum: cfg.momentum,
            transport: match cfg.transport {
                TransportKind::InProc => "inproc".into(),
                TransportKind::Tcp => "tcp".into(),
            },
            seed: cfg.seed,
        };
        match &cfg.dataset {
            DatasetConfig::Blobs {
                num_classes,
                dim,
                train_per_class,
                test_per_class,
                spread,
            } => {
                file.num_classes = *num_classes;
                file.dim = *dim;
                file.train_per_class = *train_per_class;
                file.test_per_class = *test_per_class;
                file.spread = *spread;
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                num_classes,
            } => {
                file.dataset = "idx".into();
                file.num_classes = *num_classes;
                file.train_images = Some(train_images.clone());
                file.train_labels = Some(train_labels.clone());
                file.test_images = Some(test_images.clone());
                file.test_labels = Some(test_labels.clone());
            }
        }
        file
    }
}

fn parse_transport(s: &str) -> Result<TransportKind> {
    match s {
        "inproc" => Ok(TransportKind::InProc),
        "tcp" => Ok(TransportKind::Tcp),
        other => Err(Error::Config(format!(
            "transport must be \"inproc\" or \"tcp\", got \"{other}\""
        ))),
    }
}

#[derive(Parser)]
#[command(
    name = "fsqz",
    version,
    about = "Federated learning compression simulator and message codec"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment (or one per seed) and write metrics CSVs.
    Run(RunArgs),
    /// Run a grid of experiments over one or two axes.
    Sweep(SweepArgs),
    /// Print wire sizes for a parameter count, analytic or measured.
    Sizes(SizesArgs),
    /// Print per-client class histograms for the configured partition.
    PartitionStats(PartitionStatsArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TransportArg {
    Inproc,
    Tcp,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Seed overrides; a comma list runs one experiment per seed.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    seed: Vec<u64>,
    /// Directory for metrics.csv, summary.csv, and manifest.toml.
    #[arg(long, default_value = "fsqz-out")]
    out_dir: PathBuf,
    /// Transport override.
    #[arg(long, value_enum)]
    transport: Option<TransportArg>,
    /// Run up to N seeds concurrently.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// Serve the federation for remote clients on this address.
    #[arg(long, conflicts_with = "join")]
    listen: Option<String>,
    /// Join a served federation at this address instead of running locally.
    #[arg(long)]
    join: Option<String>,
    /// How many clients to host when joining (default: all of them).
    #[arg(long, requires = "join")]
    clients: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    /// Experiment config file the grid cells start from.
    #[arg(long)]
    config: PathBuf,
    /// First grid axis.
    #[arg(long, value_enum)]
    axis: SweepAxis,
    /// Comma-separated values for the first axis.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    values: Vec<String>,
    /// Optional second axis; the grid is the cross product.
    #[arg(long, value_enum, requires = "values2")]
    axis2: Option<SweepAxis>,
    /// Comma-separated values for the second axis.
    #[arg(long, value_delimiter = ',', num_args = 1.., requires = "axis2")]
    values2: Vec<String>,
    /// Directory for sweep.csv and pivot.md.
    #[arg(long, default_value = "fsqz-out")]
    out_dir: PathBuf,
    /// Seed override for every cell.
    #[arg(long)]
    seed: Option<u64>,
    /// Run up to N cells concurrently.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// Skip training; emit analytic per-message sizes only.
    #[arg(long)]
    sizes_only: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepAxis {
    PruneRate,
    QuantBits,
    LocalEpochs,
}

impl SweepAxis {
    fn key(self) -> &'static str {
        match self {
            SweepAxis::PruneRate => "prune_rate",
            SweepAxis::QuantBits => "quant_bits",
            SweepAxis::LocalEpochs => "local_epochs",
        }
    }
}

#[derive(Args)]
struct SizesArgs {
    /// Model parameter count the messages carry.
    param_count: u64,
    /// Message kinds: dense, q8, q4, b1, sparse (default: all four widths).
    #[arg(default_value = "dense,q8,q4,b1", value_delimiter = ',')]
    kinds: Vec<String>,
    /// Also encode a seeded Gaussian vector and report real wire bytes.
    #[arg(long)]
    measure: bool,
    /// Prune this fraction before encoding; reports the deflated ratio
    /// against the unpruned baseline.
    #[arg(long)]
    prune: Option<f64>,
    /// Seed for the measured Gaussian vector.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Also write the table to this CSV file.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct PartitionStatsArgs {
    /// Experiment config file naming the dataset, client count, and alpha.
    #[arg(long)]
    config: PathBuf,
}

/// Entry point for the binary: parse, dispatch, map errors to exit codes.
pub fn main() -> std::process::ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FSQZ_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Sweep(args) => cmd_sweep(&args),
        Command::Sizes(args) => cmd_sizes(&args),
        Command::PartitionStats(args) => cmd_partition_stats(&args),
    };
    match outcome {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => std::process::ExitCode::from(2),
                _ => std::process::ExitCode::from(1),
            }
        }
    }
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn metrics_csv(metrics: &[RoundMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            m.round,
            m.accuracy,
            m.train_loss,
            m.uplink_raw,
            m.uplink_deflated,
            m.downlink_raw,
            m.downlink_deflated,
            m.sparsity
        );
    }
    out
}

struct SeedResult {
    seed: u64,
    output: ExperimentOutput,
}

fn summary_csv(results: &[SeedResult]) -> String {
    let mut out = String::from("seed,final_accuracy,uplink_deflated_B,downlink_deflated_B\n");
    let mut accs = Vec::with_capacity(results.len());
    for r in results {
        let up: u64 = r.output.metrics.iter().map(|m| m.uplink_deflated).sum();
        let down: u64 = r.output.metrics.iter().map(|m| m.downlink_deflated).sum();
        let _ = writeln!(out, "{},{},{up},{down}", r.seed, r.output.final_accuracy);
        accs.push(r.output.final_accuracy);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let _ = writeln!(out, "mean,{mean},,");
    let std = sample_std(&accs);
    match std {
        Some(s) => {
            let _ = writeln!(out, "sample_std,{s},,");
        }
        None => out.push_str("sample_std,,,\n"),
    }
    out
}

fn sample_std(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    Some(var.sqrt())
}

#[derive(Serialize)]
struct Manifest<'a> {
    artifact_version: &'static str,
    started_unix: u64,
    finished_unix: u64,
    seeds: &'a [u64],
    outputs: Vec<String>,
    config: &'a FileConfig,
}

fn resolve_run_config(args: &RunArgs) -> Result<(FileConfig, Vec<u64>)> {
    let mut file = FileConfig::load(&args.config)?;
    if let Some(t) = args.transport {
        file.transport = match t {
            TransportArg::Inproc => "inproc".into(),
            TransportArg::Tcp => "tcp".into(),
        };
    }
    let seeds = if args.seed.is_empty() {
        vec![file.seed]
    } else {
        args.seed.clone()
    };
    if args.parallel == 0 {
        return Err(Error::Config("--parallel must be at least 1".into()));
    }
    Ok((file, seeds))
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let (file, seeds) = resolve_run_config(args)?;

    if let Some(addr) = &args.join {
        let mut file = file;
        file.seed = seeds[0];
        let cfg = file.build()?;
        let clients = args.clients.unwrap_or(cfg.num_clients);
        let counters = join_experiment(&cfg, addr, clients)?;
        println!("client  msgs_sent  bytes_sent  msgs_recv  bytes_recv");
        for (id, c) in &counters {
            println!(
                "{id:>6}  {:>9}  {:>10}  {:>9}  {:>10}",
                c.messages_sent, c.bytes_sent, c.messages_received, c.bytes_received
            );
        }
        return Ok(());
    }

    let started = now_unix();
    let mut results = Vec::with_capacity(seeds.len());
    if let Some(addr) = &args.listen {
        if seeds.len() > 1 {
            return Err(Error::Config(
                "--listen serves a single federation; pass one seed".into(),
            ));
        }
        let mut file = file.clone();
        file.seed = seeds[0];
        let cfg = file.build()?;
        results.push(SeedResult {
            seed: seeds[0],
            output: serve_experiment(&cfg, addr)?,
        });
    } else {
        // Validate every seed's config before starting any run.
        let mut configs = Vec::with_capacity(seeds.len());
        for &seed in &seeds {
            let mut file = file.clone();
            file.seed = seed;
            configs.push(file.build()?);
        }
        for chunk in configs.chunks(args.parallel.max(1)) {
            let outputs = std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|cfg| scope.spawn(move || run_experiment(cfg)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("experiment thread panicked"))
                    .collect::<Vec<_>>()
            });
            for (cfg, output) in chunk.iter().zip(outputs) {
                results.push(SeedResult {
                    seed: cfg.seed,
                    output: output?,
                });
            }
        }
    }

    let mut outputs = Vec::new();
    for r in &results {
        let name = if results.len() == 1 {
            "metrics.csv".to_string()
        } else {
            format!("metrics-{}.csv", r.seed)
        };
        write_file(&args.out_dir.join(&name), &metrics_csv(&r.output.metrics))?;
        outputs.push(name);
    }
    write_file(&args.out_dir.join("summary.csv"), &summary_csv(&results))?;
    outputs.push("summary.csv".to_string());

    let snapshot = FileConfig::from_experiment(&{
        let mut file = file.clone();
        file.seed = seeds[0];
        file.build()?
    });
    let manifest = Manifest {
        artifact_version: env!("CARGO_PKG_VERSION"),
        started_unix: started,
        finished_unix: now_unix(),
        seeds: &seeds,
        outputs: outputs.clone(),
        config: &snapshot,
    };
    let manifest_text = toml::to_string(&manifest)
        .map_err(|e| Error::Internal(format!("manifest serialization: {e}")))?;
    write_file(&args.out_dir.join("manifest.toml"), &manifest_text)?;

    for r in &results {
        println!(
            "seed {}: final accuracy {:.4} over {} rounds",
            r.seed,
            r.output.final_accuracy,
            r.output.metrics.len()
        );
    }
    if results.len() > 1 {
        let accs: Vec<f64> = results.iter().map(|r| r.output.final_accuracy).collect();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let std = sample_std(&accs).unwrap_or(0.0);
        println!("mean final accuracy {mean:.4} +/- {std:.4} (sample std, n={})", accs.len());
    }
    println!("wrote {}", args.out_dir.join("manifest.toml").display());
    Ok(())
}

/// One sweep grid cell: the overrides applied to the base config.
#[derive(Debug, Clone, Copy)]
struct SweepCell {
    prune_rate: Option<f64>,
    quant_bits: Option<Option<u8>>,
    local_epochs: Option<usize>,
}

impl SweepCell {
    fn apply(&self, file: &FileConfig) -> FileConfig {
        let mut out = file.clone();
        if let Some(r) = self.prune_rate {
            out.prune_rate = r;
        }
        if let Some(b) = self.quant_bits {
            out.quant_bits = b;
            // Sweeping widths against a pruning base compares arms, not
            // stacked compression.
            if b.is_some() && !out.combined {
                out.prune_rate = 0.0;
            }
        }
        if let Some(e) = self.local_epochs {
            out.local_epochs = e;
        }
        out
    }
}

fn parse_axis_value(axis: SweepAxis, raw: &str) -> Result<SweepCell> {
    let mut cell = SweepCell {
        prune_rate: None,
        quant_bits: None,
        local_epochs: None,
    };
    let bad = |what: &str| Error::Config(format!("{} value \"{raw}\": {what}", axis.key()));
    match axis {
        SweepAxis::PruneRate => {
            let v: f64 = raw.parse().map_err(|_| bad("not a number"))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(bad("must be in [0, 1]"));
            }
            cell.prune_rate = Some(v);
        }
        SweepAxis::QuantBits => {
            let v: u8 = raw.parse().map_err(|_| bad("not an integer"))?;
            cell.quant_bits = Some(match v {
                32 => None,
                1 | 4 | 8 => Some(v),
                _ => return Err(bad("must be 1, 4, 8, or 32")),
            });
        }
        SweepAxis::LocalEpochs => {
            let v: usize = raw.parse().map_err(|_| bad("not an integer"))?;
            if v == 0 {
                return Err(bad("must be at least 1"));
            }
            cell.local_epochs = Some(v);
        }
    }
    Ok(cell)
}

fn merge_cells(a: SweepCell, b: SweepCell) -> SweepCell {
    SweepCell {
        prune_rate: b.prune_rate.or(a.prune_rate),
        quant_bits: b.quant_bits.or(a.quant_bits),
        local_epochs: b.local_epochs.or(a.local_epochs),
    }
}

/// Analytic per-message size for a cell's uplink payload.
fn cell_estimate(cfg: &ExperimentConfig) -> u64 {
    let n = cfg.model_spec().param_count() as u64;
    match cfg.quant_bits {
        Some(1) => estimate_size(SizeKind::Binary, n, 0),
        Some(b) => estimate_size(SizeKind::Quant(b), n, 0),
        None if cfg.prune_rate > 0.0 => {
            let zeros = (cfg.prune_rate * n as f64).floor() as u64;
            estimate_size(SizeKind::Sparse, n, n - zeros)
        }
        None => estimate_size(SizeKind::Dense, n, 0),
    }
}

struct CellResult {
    labels: Vec<(String, String)>,
    final_accuracy: Option<f64>,
    uplink_msg_b: f64,
}

fn aligned_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |cells: &[String], widths: &[usize]| -> String {
        let parts: Vec<String> = cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        format!("| {} |", parts.join(" | "))
    };
    out.push_str(&line(header, &widths));
    out.push('\n');
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&line(&rule, &widths));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row, &widths));
        out.push('\n');
    }
    out
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    if args.values.is_empty() {
        return Err(Error::Config("sweep needs at least one axis value".into()));
    }
    if args.parallel == 0 {
        return Err(Error::Config("--parallel must be at least 1".into()));
    }
    let mut file = FileConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        file.seed = seed;
    }

    let axis1: Vec<(String, SweepCell)> = args
        .values
        .iter()
        .map(|raw| Ok((raw.clone(), parse_axis_value(args.axis, raw)?)))
        .collect::<Result<_>>()?;
    let axis2: Vec<(String, SweepCell)> = match args.axis2 {
        Some(axis) => {
            if axis == args.axis {
                return Err(Error::Config("both sweep axes are the same".into()));
            }
            if args.values2.is_empty() {
                return Err(Error::Config("second axis has no values".into()));
            }
            args.values2
                .iter()
                .map(|raw| Ok((raw.clone(), parse_axis_value(axis, raw)?)))
                .collect::<Result<_>>()?
        }
        None => vec![(String::new(), SweepCell {
            prune_rate: None,
            quant_bits: None,
            local_epochs: None,
        })],
    };

    // Build and validate the whole grid before running anything.
    let mut cells = Vec::new();
    for (v1, c1) in &axis1 {
        for (v2, c2) in &axis2 {
            let cell_file = merge_cells(*c1, *c2).apply(&file);
            let cfg = cell_file.build()?;
            let mut labels = vec![(args.axis.key().to_string(), v1.clone())];
            if let Some(axis) = args.axis2 {
                labels.push((axis.key().to_string(), v2.clone()));
            }
            cells.push((labels, cfg));
        }
    }

    let mut results: Vec<CellResult> = Vec::with_capacity(cells.len());
    if args.sizes_only {
        for (labels, cfg) in &cells {
            results.push(CellResult {
                labels: labels.clone(),
                final_accuracy: None,
                uplink_msg_b: cell_estimate(cfg) as f64,
            });
        }
    } else {
        for chunk in cells.chunks(args.parallel) {
            let outputs = std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|(_, cfg)| scope.spawn(move || run_experiment(cfg)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("sweep cell thread panicked"))
                    .collect::<Vec<_>>()
            });
            for ((labels, _), output) in chunk.iter().zip(outputs) {
                let output = output?;
                let messages: u64 = output
                    .metrics
                    .iter()
                    .map(|m| m.participants.len() as u64)
                    .sum();
                let bytes: u64 = output.metrics.iter().map(|m| m.uplink_deflated).sum();
                results.push(CellResult {
                    labels: labels.clone(),
                    final_accuracy: Some(output.final_accuracy),
                    uplink_msg_b: if messages == 0 {
                        0.0
                    } else {
                        bytes as f64 / messages as f64
                    },
                });
            }
        }
    }

    // Long-form CSV, one row per cell.
    let mut csv = String::from("prune_rate,quant_bits,local_epochs,final_accuracy,uplink_msg_B,uplink_msg_MiB\n");
    for ((_, cfg), r) in cells.iter().zip(&results) {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{:.4}",
            cfg.prune_rate,
            cfg.quant_bits.map(|b| b.to_string()).unwrap_or_default(),
            cfg.local_epochs,
            r.final_accuracy.map(|a| a.to_string()).unwrap_or_default(),
            r.uplink_msg_b,
            r.uplink_msg_b / MIB
        );
    }
    write_file(&args.out_dir.join("sweep.csv"), &csv)?;

    // Pivot: one row per first-axis value.
    let acc_cell = |r: &CellResult| {
        r.final_accuracy
            .map(|a| format!("{a:.4}"))
            .unwrap_or_else(|| "-".into())
    };
    let size_cell = |r: &CellResult| format!("{:.4}", r.uplink_msg_b / MIB);
    let pivot = if args.axis2.is_none() {
        let header = vec![
            args.axis.key().to_string(),
            "final_accuracy".to_string(),
            "uplink_msg_MiB".to_string(),
        ];
        let rows: Vec<Vec<String>> = results
            .iter()
            .map(|r| vec![r.labels[0].1.clone(), acc_cell(r), size_cell(r)])
            .collect();
        aligned_table(&header, &rows)
    } else {
        let axis2_name = args.axis2.unwrap().key();
        let mut out = String::new();
        for (title, cell_of) in [
            ("final accuracy", &acc_cell as &dyn Fn(&CellResult) -> String),
            ("uplink message MiB", &size_cell),
        ] {
            let mut header = vec![format!("{} \\ {axis2_name}", args.axis.key())];
            header.extend(axis2.iter().map(|(v, _)| v.clone()));
            let mut rows = Vec::new();
            for (i, (v1, _)) in axis1.iter().enumerate() {
                let mut row = vec![v1.clone()];
                for j in 0..axis2.len() {
                    row.push(cell_of(&results[i * axis2.len() + j]));
                }
                rows.push(row);
            }
            let _ = writeln!(out, "{title}:");
            out.push_str(&aligned_table(&header, &rows));
            out.push('\n');
        }
        out
    };
    write_file(&args.out_dir.join("pivot.md"), &pivot)?;
    print!("{pivot}");
    println!("wrote {}", args.out_dir.join("sweep.csv").display());
    Ok(())
}

fn parse_size_kind(token: &str) -> Result<SizeKind> {
    match token {
        "dense" => Ok(SizeKind::Dense),
        "q8" => Ok(SizeKind::Quant(8)),
        "q4" => Ok(SizeKind::Quant(4)),
        "b1" => Ok(SizeKind::Binary),
        "sparse" => Ok(SizeKind::Sparse),
        other => Err(Error::Config(format!(
            "unknown size kind \"{other}\" (expected dense, q8, q4, b1, or sparse)"
        ))),
    }
}

fn gaussian_vector(n: usize, seed: u64) -> Vec<f32> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32
        })
        .collect()
}

fn cmd_sizes(args: &SizesArgs) -> Result<()> {
    if let Some(rate) = args.prune {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "--prune must be in [0, 1], got {rate}"
            )));
        }
    }
    let kinds: Vec<SizeKind> = args
        .kinds
        .iter()
        .map(|t| parse_size_kind(t))
        .collect::<Result<_>>()?;

    let n = args.param_count;
    let rate = args.prune.unwrap_or(0.0);
    let nnz = n - (rate * n as f64).floor() as u64;

    // One pruned vector serves all measured kinds; the unpruned baseline
    // calibrates the deflated ratio.
    let measured: Option<(Vec<f32>, u64)> = if args.measure {
        let dense = gaussian_vector(n as usize, args.seed);
        let baseline = measure_payload(SizeKind::Dense, &Payload::Dense(dense.clone()))?
            .deflated_bytes;
        let vector = if rate > 0.0 {
            global_magnitude_prune(&dense, rate, None)?.0
        } else {
            dense
        };
        Some((vector, baseline))
    } else {
        None
    };

    let mut header = vec![
        "kind".to_string(),
        "estimate_B".to_string(),
        "estimate_MiB".to_string(),
    ];
    if args.measure {
        header.extend([
            "raw_B".to_string(),
            "deflated_B".to_string(),
            "deflated_MiB".to_string(),
            "vs_dense".to_string(),
        ]);
    }
    let mut rows = Vec::new();
    let mut csv_rows = Vec::new();
    for kind in &kinds {
        let est = estimate_size(*kind, n, nnz);
        let mut row = vec![
            kind.to_string(),
            est.to_string(),
            format!("{:.2} MiB", est as f64 / MIB),
        ];
        let mut csv_row = vec![kind.to_string(), est.to_string()];
        if let Some((vector, baseline)) = &measured {
            let payload = match kind {
                SizeKind::Dense => Payload::Dense(vector.clone()),
                SizeKind::Sparse => Payload::sparse_from_dense(vector),
                SizeKind::Quant(bits) => {
                    let (codes, scale_exp) = crate::compress::quantize_slice(vector, *bits)?;
                    Payload::Quant(crate::compress::QuantizedModel {
                        bits: *bits,
                        layers: vec![crate::compress::QuantLayer { scale_exp, codes }],
                    })
                }
                SizeKind::Binary => Payload::Binary {
                    signs: vector.iter().map(|&v| if v < 0.0 { -1 } else { 1 }).collect(),
                },
            };
            let report = measure_payload(*kind, &payload)?;
            let ratio = report.deflated_bytes as f64 / *baseline as f64;
            row.extend([
                report.raw_bytes.to_string(),
                report.deflated_bytes.to_string(),
                format!("{:.2} MiB", report.deflated_bytes as f64 / MIB),
                format!("{ratio:.4}"),
            ]);
            csv_row.extend([
                report.raw_bytes.to_string(),
                report.deflated_bytes.to_string(),
                format!("{ratio:.6}"),
            ]);
        }
        rows.push(row);
        csv_rows.push(csv_row);
    }

    println!("{n} parameters, prune rate {rate}");
    print!("{}", aligned_table(&header, &rows));
    if let Some(path) = &args.csv {
        let mut csv = String::from(if args.measure {
            "kind,estimate_B,raw_B,deflated_B,vs_dense\n"
        } else {
            "kind,estimate_B\n"
        });
        for row in &csv_rows {
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
        write_file(path, &csv)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_partition_stats(args: &PartitionStatsArgs) -> Result<()> {
    let file = FileConfig::load(&args.config)?;
    let cfg = file.build()?;
    let (train, _) = match &cfg.dataset {
        DatasetConfig::Blobs { .. } | DatasetConfig::Idx { .. } => {
            // Reuse the experiment's own dataset construction.
            build_dataset(&cfg)?
        }
    };
    let partition = lda_partition(&train, &cfg.partition_spec())?;
    let stats = partition_stats(&partition, &train)?;

    let mut header = vec!["client".to_string(), "examples".to_string()];
    header.extend((0..train.num_classes).map(|c| format!("class{c}")));
    let mut rows = Vec::new();
    for (id, hist) in stats.class_histograms.iter().enumerate() {
        let mut row = vec![id.to_string(), stats.counts[id].to_string()];
        row.extend(hist.iter().map(|c| c.to_string()));
        rows.push(row);
    }
    println!(
        "{} examples over {} clients, alpha {}",
        train.len(),
        cfg.num_clients,
        cfg.alpha
    );
    print!("{}", aligned_table(&header, &rows));
    println!("mean label TV distance vs global: {:.4}", mean_label_tv(&stats));
    Ok(())
}

fn build_dataset(cfg: &ExperimentConfig) -> Result<(crate::data::Dataset, crate::data::Dataset)> {
    match &cfg.dataset {
        DatasetConfig::Blobs {
            num_classes,
            dim,
            train_per_class,
            test_per_class,
            spread,
        } => {
            let full = crate::data::gen_blobs(
                *num_classes,
                *dim,
                train_per_class + test_per_class,
                *spread,
                cfg.seed,
            )?;
            crate::data::split_per_class(&full, *train_per_class)
        }
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            num_classes,
        } => Ok((
            crate::data::load_idx_dataset(train_images, train_labels, *num_classes)?,
            crate::data::load_idx_dataset(test_images, test_labels, *num_classes)?,
        )),
    }
}
