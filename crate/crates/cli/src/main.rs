mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Dynamic-routing segmentation with jigsaw and semi-supervised training.
#[derive(Debug, Parser)]
#[command(name = "selene", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Seed; falls back to SELENE_SEED, then to the config file, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (1 implies deterministic mode).
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: u64,
    /// Force single-threaded numerics for bit-reproducible output.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

impl Common {
    pub fn threads(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.threads as usize
        }
    }

    /// The explicit seed, else `SELENE_SEED`.
    pub fn seed_override(&self) -> anyhow::Result<Option<u64>> {
        if let Some(s) = self.seed {
            return Ok(Some(s));
        }
        match std::env::var("SELENE_SEED") {
            Ok(v) => v
                .trim()
                .parse()
                .map(Some)
                .map_err(|_| anyhow::anyhow!("SELENE_SEED={v:?} is not an unsigned integer")),
            Err(_) => Ok(None),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic shapes dataset with optional split files.
    GenData(GenDataArgs),
    /// Train a network and write metrics.csv plus checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Finite-difference gradient checks of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Multiply-accumulate count of a network at one or more gate thresholds.
    Flops(FlopsArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 96)]
    pub size: usize,
    /// Labeled fraction such as 1/8; repeat for several split files.
    #[arg(long)]
    pub fraction: Vec<String>,
    /// Extra samples written to `<out>/val`.
    #[arg(long, default_value_t = 0)]
    pub val_count: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Training dataset directory (overrides `data`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Validation dataset directory (overrides `val`).
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Split file (overrides `split`).
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Labeled fraction when no split file is given (overrides `fraction`).
    #[arg(long)]
    pub fraction: Option<String>,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    /// Any config key, e.g. `--set lambda2=10`; applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Continue from a trainer checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Append a row to `<out>/eval.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Scale the analytic gradient of this check by 1.01 (negative control).
    #[arg(long, value_name = "NAME")]
    pub inject_fault: Option<String>,
    /// Write `<out>/gradcheck.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    /// Network to count; without it a freshly initialised network is used.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Input size as HxW.
    #[arg(long, default_value = "96x96")]
    pub input: String,
    /// Gate threshold; repeat for several.
    #[arg(long, default_values_t = [0.0])]
    pub tau: Vec<f64>,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Write `<out>/flops.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Flops(a) => commands::flops(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
