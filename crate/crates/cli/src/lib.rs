//! `idhnet` command-line driver.

pub mod commands;
pub mod config;
pub mod rundir;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Io(_) => 5,
        }
    }
}

impl From<idhnet::Error> for CliError {
    fn from(e: idhnet::Error) -> Self {
        use idhnet::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) | E::TumorOutOfBounds(_) => CliError::Config(msg),
            E::Divergence(_) => CliError::Divergence(msg),
            E::ReadError { .. } | E::WriteError { .. } => CliError::Io(msg),
            _ => CliError::Data(msg),
        }
    }
}

impl From<idhnet_stats::StatsError> for CliError {
    fn from(e: idhnet_stats::StatsError) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "idhnet", version, about = "IDH genotype classification from 4-sequence MRI volumes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.learning_rate=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory; each run writes into a timestamped subdirectory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Master seed (sets `train.seed` and `data.phantom.master_seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom dataset (bundles + manifest.csv) into --out.
    Phantom {
        #[command(flatten)]
        common: Common,
        /// Number of cases (overrides data.phantom.n_cases).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train one fold: manifest train/val splits, or fold --fold of the
    /// stratified split when the manifest has no val rows.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Stratified k-fold cross-validation (k = data.folds).
    Crossval {
        #[command(flatten)]
        common: Common,
    },
    /// Cross-validate every cell of an ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// `modules`, `depth`, or a JSON file with a list of {name, modules}.
        #[arg(long, default_value = "modules")]
        grid: String,
    },
    /// Ensemble checkpoints on the manifest's test rows (all rows when none
    /// are tagged test) and report metrics with DeLong intervals.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// CSV `case_id,score` of a reference model for a paired DeLong test.
        #[arg(long)]
        reference_scores: Option<PathBuf>,
    },
    /// Occlusion saliency for one case: saliency volume + overlay PNG.
    Occlusion {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Case id from the manifest.
        #[arg(long)]
        case: String,
        /// Axial slice; defaults to the tumor centroid (or the middle slice).
        #[arg(long)]
        slice: Option<usize>,
        #[arg(long, default_value = "flair")]
        sequence: String,
        #[arg(long, default_value_t = 0.6)]
        alpha: f64,
    },
}

/// Runs the CLI on `args` and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("idhnet: {e}");
            e.exit_code()
        }
    }
}
