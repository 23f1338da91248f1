//! `stairnet` command line: generate | train | eval | infer | stats.

mod commands;
mod config;
mod overlay;

use clap::{Args, Parser, Subcommand};
use stairnet::data::DataError;
use stairnet::model::{CheckpointError, ModelError};
use stairnet::tensor::ShapeError;
use stairnet::train::TrainError;
use std::path::PathBuf;
use std::process::ExitCode;
use thiserror::Error;
use toml::Value;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Io(_) | CliError::Other(_) => 1,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) | DataError::Infeasible(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ShapeError> for CliError {
    fn from(e: ShapeError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Mismatch(_) | CheckpointError::Model(_) => CliError::Config(e.to_string()),
            CheckpointError::Io { .. } | CheckpointError::Format { .. } => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Loss(_) => CliError::Config(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Divergence(_) => CliError::Divergence(e.to_string()),
            TrainError::EmptyDataset | TrainError::Eval(_) => CliError::Data(e.to_string()),
            TrainError::Log { .. } => CliError::Io(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "stairnet", version, about = "Stair line detection on a coarse cell grid")]
struct Cli {
    /// TOML file with settings for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any setting by its dotted key, e.g. `--set train.epochs=10`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Generate(GenerateArgs),
    /// Train a network on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the ground truth) on a dataset.
    Eval(EvalArgs),
    /// Detect stair lines in images.
    Infer(InferArgs),
    /// Line aspect-ratio histogram of a dataset.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    width: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Score the ground-truth grids instead of a network.
    #[arg(long)]
    ground_truth: bool,
}

#[derive(Debug, Args)]
struct InferArgs {
    images: Vec<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    overlay: bool,
    #[arg(long)]
    threshold: Option<f32>,
    #[arg(long)]
    latency_runs: Option<usize>,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Collects `(key, value)` overrides for the flags that were given.
#[derive(Default)]
struct Overrides(Vec<(String, Value)>);

impl Overrides {
    fn opt<T: Into<Value>>(&mut self, key: &str, v: Option<T>) -> &mut Self {
        if let Some(v) = v {
            self.0.push((key.to_string(), v.into()));
        }
        self
    }

    fn path(&mut self, key: &str, v: Option<PathBuf>) -> &mut Self {
        self.opt(key, v.map(|p| p.to_string_lossy().into_owned()))
    }

    fn int(&mut self, key: &str, v: Option<impl TryInto<i64>>) -> Result<&mut Self, CliError> {
        match v.map(|x| x.try_into()) {
            Some(Ok(x)) => Ok(self.opt(key, Some(x))),
            Some(Err(_)) => Err(CliError::Config(format!("{key}: value out of range"))),
            None => Ok(self),
        }
    }

    fn flag(&mut self, key: &str, on: bool) -> &mut Self {
        self.opt(key, on.then_some(true))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = cli.config.as_deref();
    let mut o = Overrides::default();
    // Explicit flags win over `--set`, which wins over the file.
    let set = config::parse_set(&cli.set)?;
    match cli.command {
        Command::Generate(a) => {
            o.path("out", a.out).int("count", a.count)?.int("seed", a.seed)?;
            commands::generate(config::resolve(file, [set, o.0].concat())?)
        }
        Command::Train(a) => {
            o.path("data", a.data)
                .path("out", a.out)
                .path("resume", a.resume)
                .opt("model.width_factor", a.width)
                .int("train.epochs", a.epochs)?
                .int("train.batch_size", a.batch_size)?
                .opt("train.initial_lr", a.lr)
                .int("train.seed", a.seed)?;
            let mut cfg: commands::TrainRunConfig = config::resolve(file, [set, o.0].concat())?;
            let default_period = stairnet::train::TrainConfig::default().lr_halving_period;
            if cfg.train.lr_halving_period == default_period && cfg.train.epochs < default_period {
                // Short runs keep a constant rate instead of failing validation.
                cfg.train.lr_halving_period = cfg.train.epochs.max(1);
            }
            commands::run_train(cfg)
        }
        Command::Eval(a) => {
            o.path("data", a.data)
                .path("out", a.out)
                .path("checkpoint", a.checkpoint)
                .flag("ground_truth", a.ground_truth);
            commands::run_eval(config::resolve(file, [set, o.0].concat())?)
        }
        Command::Infer(a) => {
            if !a.images.is_empty() {
                let list = a.images.iter().map(|p| Value::String(p.to_string_lossy().into_owned()));
                o.0.push(("images".into(), Value::Array(list.collect())));
            }
            o.path("checkpoint", a.checkpoint)
                .path("out", a.out)
                .flag("overlay", a.overlay)
                .opt("score_threshold", a.threshold.map(f64::from))
                .int("latency_runs", a.latency_runs)?;
            commands::run_infer(config::resolve(file, [set, o.0].concat())?)
        }
        Command::Stats(a) => {
            o.path("data", a.data).path("out", a.out);
            commands::run_stats(config::resolve(file, [set, o.0].concat())?)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stairnet: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
