mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use rfo::checkpoint::CheckpointError;
use rfo::config::ConfigError;
use rfo::gradcheck::GradCheckError;
use rfo::trainer::TrainError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Config { path: String, source: ConfigError },
    #[error("--set {0}: expected key=value")]
    Override(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    GradCheck(#[from] GradCheckError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad seed list {0:?}: expected `n`, `a..b` or `a,b,c`")]
    Seeds(String),
    #[error("bad grid axis {0:?}: expected key=v1,v2,...")]
    Grid(String),
    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "rfo",
    version,
    about = "Train and analyze flow policies on differentiable toy dynamics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command that builds a config.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Flat key = value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Policy head.
    #[arg(long, value_name = "rfo|shac-gaussian")]
    pub algo: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long, env = "RFO_OUT", default_value = "runs")]
    pub out: PathBuf,
    /// Seeds: `n`, inclusive range `a..b`, or list `a,b,c`.
    #[arg(long = "seeds", visible_alias = "seed")]
    pub seeds: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one run per seed; writes metrics, config and checkpoints.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Episode count (defaults to the config's eval_episodes).
        #[arg(long)]
        episodes: Option<usize>,
        /// Seed for initial states and action noise.
        #[arg(long, default_value_t = 0)]
        eval_seed: u64,
        /// Where to write eval.csv (defaults to the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable block.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train every cell of a grid such as `K=1,2,4,8 c_past=0.1,0.2`.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(required = true, value_name = "KEY=V1,V2")]
        grid: Vec<String>,
    },
    /// KL and past-data CFM loss between consecutive stored checkpoints.
    KlMonitor {
        /// A run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 128)]
        pairs: usize,
        #[arg(long, default_value_t = 256)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render metrics CSVs to an SVG line chart.
    Plot {
        /// Metrics files or run directories (searched for metrics.csv).
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "eval_return")]
        column: String,
        /// Moving-average window.
        #[arg(long, default_value_t = 100)]
        window: usize,
        #[arg(long, default_value = "plot.svg")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, out } => commands::train(&config, &out),
        Command::Eval {
            config,
            checkpoint,
            episodes,
            eval_seed,
            out,
        } => commands::eval(&config, &checkpoint, episodes, eval_seed, out.as_deref()),
        Command::Gradcheck { seed } => commands::gradcheck(seed),
        Command::Ablate { config, out, grid } => commands::ablate(&config, &out, &grid),
        Command::KlMonitor {
            run,
            pairs,
            draws,
            seed,
        } => commands::kl_monitor(&run, pairs, draws, seed),
        Command::Plot {
            inputs,
            column,
            window,
            out,
        } => plot::plot(&inputs, &column, window, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
