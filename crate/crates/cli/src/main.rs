mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Failure classes, each with its own exit status.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Divergence(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Divergence(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Divergence(m) => write!(f, "numerical divergence: {m}"),
        }
    }
}

impl From<dehazeflow::Error> for CliError {
    fn from(e: dehazeflow::Error) -> Self {
        use dehazeflow::Error as E;
        match e {
            E::Divergence { .. } => CliError::Divergence(e.to_string()),
            E::InvalidArgument(_) | E::UnknownSuite(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "dehazeflow", version, about = "Dehazing by integrating a learned haze-aware vector field")]
struct Cli {
    /// key = value settings file; flags take precedence
    #[arg(long, global = true, env = "DEHAZEFLOW_CONFIG")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

/// Model, flow and training settings shared by several commands.
#[derive(Args, Debug, Default)]
pub struct ModelFlags {
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    lut_size: Option<usize>,
    /// removed, fixed or learnable
    #[arg(long)]
    lut_mode: Option<String>,
    /// euler, midpoint or rk4
    #[arg(long)]
    solver: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
pub struct TrainFlags {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// synthetic training pairs when no --data is given
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    val_pairs: Option<usize>,
    /// synthetic image side length
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train end to end and write the best-validation checkpoint
    Train {
        /// directory with hazy/ and clean/ subdirectories of matching names
        #[arg(long)]
        data: Option<PathBuf>,
        /// validation directory (same layout); default holds out every fifth pair
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
        /// also write the per-epoch history as CSV
        #[arg(long)]
        history: Option<PathBuf>,
        /// also write the learned LUT as a plain-text .cube table
        #[arg(long)]
        export_lut: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Dehaze one image
    Dehaze {
        #[arg(long, short)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        solver: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
        /// process in overlapping tiles of this size
        #[arg(long)]
        tile: Option<usize>,
        #[arg(long)]
        overlap: Option<usize>,
        /// memory budget for tiled processing, MiB
        #[arg(long)]
        budget_mb: Option<u64>,
        /// write step_000.png (input) through step_N.png into this directory
        #[arg(long)]
        record_trajectory: Option<PathBuf>,
        /// output bit depth (8 or 16)
        #[arg(long, default_value_t = 8)]
        bits: u8,
    },
    /// Score a checkpoint on a paired directory
    Eval {
        #[arg(long, short)]
        checkpoint: PathBuf,
        /// directory with hazy/ and clean/ subdirectories
        #[arg(long)]
        data: PathBuf,
        /// key=value output instead of a table
        #[arg(long)]
        kv: bool,
    },
    /// Time one integration and report MACs and memory
    Bench {
        /// use this checkpoint instead of a freshly initialised model
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// WIDTHxHEIGHT
        #[arg(long, default_value = "512x512")]
        image: String,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        kv: bool,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Run the LUT / lambda / solver ablations
    Ablate {
        /// lut, lambda, solver or all
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
