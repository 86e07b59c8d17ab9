mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use driftmoe::data::Split;
use driftmoe::drift::HistoryPolicy;

/// Drift-aware mixture-of-experts forecasting.
#[derive(Parser)]
#[command(name = "driftmoe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic regime-shift stream from a TOML script.
    Gen {
        #[arg(long)]
        script: PathBuf,
        /// Output CSV; shift indices go to `<stem>.shifts.json` beside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint; prints metrics JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Run the drift detector over a CSV stream; prints one JSON line per evaluation.
    Detect(DetectArgs),
    /// Score a residual file (one series per row); prints a JSON report.
    Profile {
        #[arg(long)]
        residuals: PathBuf,
    },
}

#[derive(Args)]
pub struct TrainArgs {
    /// Data CSV (label column, then one column per variable).
    #[arg(long, required_unless_present = "manifest")]
    data: Option<PathBuf>,
    /// Run directory for checkpoint, logs and manifest.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with model configuration keys.
    #[arg(long, conflicts_with = "manifest")]
    config: Option<PathBuf>,
    /// Start from a benchmark preset, e.g. `etth1:96`.
    #[arg(long, conflicts_with = "manifest")]
    preset: Option<String>,
    /// Override one configuration key, e.g. `--set train.lr=4e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE", conflicts_with = "manifest")]
    sets: Vec<String>,
    /// Disable drift detection and pool changes.
    #[arg(long, conflicts_with = "manifest")]
    no_adapt: bool,
    /// Also write test-split predictions to `predictions.csv`.
    #[arg(long, conflicts_with = "manifest")]
    dump_predictions: bool,
    /// Also write test-split routing weights to `routes_layer<l>.csv`.
    #[arg(long, conflicts_with = "manifest")]
    dump_routes: bool,
    /// Repeat a previous run from its manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
pub struct DetectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    ref_size: Option<usize>,
    #[arg(long)]
    cur_size: Option<usize>,
    #[arg(long)]
    history: Option<usize>,
    #[arg(long)]
    min_fill: Option<usize>,
    #[arg(long, value_enum)]
    on_drift: Option<PolicyArg>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum PolicyArg {
    Retain,
    Clear,
    Rescore,
}

impl From<PolicyArg> for HistoryPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Retain => HistoryPolicy::Retain,
            PolicyArg::Clear => HistoryPolicy::Clear,
            PolicyArg::Rescore => HistoryPolicy::Rescore,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen { script, out } => commands::gen(&script, &out),
        Command::Train(args) => commands::train(&args),
        Command::Eval {
            checkpoint,
            data,
            split,
        } => commands::eval(&checkpoint, &data, split.into()),
        Command::Detect(args) => commands::detect(&args),
        Command::Profile { residuals } => commands::profile(&residuals),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
