//! `trajcal`: extract trajectory features, train and evaluate calibrators,
//! run baselines and generate synthetic traces.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trajcal::Penalty;

#[derive(Parser)]
#[command(name = "trajcal", version, about = "Trajectory-level confidence calibration toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Turn a trace file into a feature table.
    Extract(ExtractArgs),
    /// Cross-validate the alpha grid and fit a calibrator on a feature table.
    Train(TrainArgs),
    /// Score a saved model on a labelled feature table.
    Eval(EvalArgs),
    /// Apply a model trained on one domain to another, without refitting.
    Transfer(EvalArgs),
    /// Pretrain one calibrator on several pooled feature tables.
    Gac(GacArgs),
    /// Inference-only baselines: last-step, global-trace, verbalized, temperature scaling.
    Baselines(BaselineArgs),
    /// Generate synthetic traces from a generator config (TOML).
    Synth(SynthArgs),
}

#[derive(Args)]
pub struct ExtractArgs {
    /// Trace file.
    #[arg(long)]
    pub input: PathBuf,
    /// Feature table (CSV).
    #[arg(long)]
    pub output: PathBuf,
    /// Keep at most k entries of every top-k list.
    #[arg(long)]
    pub k: Option<usize>,
    /// Comma-separated categories: dynamics, position, stability, structure.
    #[arg(long)]
    pub categories: Option<String>,
    /// Use only the first m steps of every trajectory (all of it if shorter).
    #[arg(long)]
    pub prefix: Option<usize>,
}

#[derive(Args)]
pub struct FitArgs {
    #[arg(long, default_value_t = Penalty::L1)]
    pub penalty: Penalty,
    /// Single regularization strength; skips the grid.
    #[arg(long, conflicts_with = "grid")]
    pub alpha: Option<f64>,
    /// Comma-separated alpha grid (default: the 15 published values).
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = trajcal::calibrator::DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = trajcal::metrics::DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long, default_value_t = trajcal::pipeline::DEFAULT_FOLDS)]
    pub folds: usize,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Labelled feature table.
    #[arg(long)]
    pub input: PathBuf,
    /// Model file; the CV report goes to `<output>.cv.json`.
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub fit: FitArgs,
}

#[derive(Args)]
pub struct GacArgs {
    /// Source feature tables (repeat the flag or list several).
    #[arg(long, num_args = 1.., required = true)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub fit: FitArgs,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Labelled feature table.
    #[arg(long)]
    pub input: PathBuf,
    /// Report (JSON); reliability bins go to `<output>.bins.csv`.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = trajcal::metrics::DEFAULT_BINS)]
    pub bins: usize,
}

#[derive(Args)]
pub struct BaselineArgs {
    /// Trace file.
    #[arg(long)]
    pub input: PathBuf,
    /// Score rows (CSV); the summary goes to `<output>.summary.json`.
    #[arg(long)]
    pub output: PathBuf,
    /// Fraction of labelled trajectories used to fit the temperature.
    #[arg(long, default_value_t = trajcal::pipeline::INNER_HOLDOUT)]
    pub fit_frac: f64,
    #[arg(long, default_value_t = trajcal::calibrator::DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = trajcal::metrics::DEFAULT_BINS)]
    pub bins: usize,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Generator config (TOML).
    #[arg(long)]
    pub input: PathBuf,
    /// Trace file; the oracle sidecar goes to `<output>.oracle.csv`.
    #[arg(long)]
    pub output: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config top-k length.
    #[arg(long)]
    pub k: Option<usize>,
}

fn init_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("TRAJCAL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("TRAJCAL_THREADS must be a positive integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    let name = commands::name(&cli.command);
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {name}: {e:#}");
            ExitCode::from(commands::exit_code(name, &e))
        }
    }
}
