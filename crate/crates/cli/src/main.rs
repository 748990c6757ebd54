//! `moirai`: synthesize corpora, train, forecast, evaluate and benchmark.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "moirai", version, about = "Decoder-only quantile forecasting at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a KernelSynth corpus.
    Synth(SynthArgs),
    /// Generate TSMixup series from an existing corpus.
    Mixup(MixupArgs),
    /// Train a model and write a checkpoint plus a metrics log.
    Train(TrainArgs),
    /// Forecast past the end of every series in a corpus.
    Forecast(ForecastArgs),
    /// Score a model against seasonal naive on held-out tasks.
    Eval(EvalArgs),
    /// Time decoding with and without the KV cache.
    BenchKv(BenchArgs),
    /// Re-run the command recorded in a run manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    /// Number of series.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Length of every series.
    #[arg(long, default_value_t = 512)]
    pub len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Frequency token stored with each series.
    #[arg(long, default_value = "H")]
    pub freq: String,
    /// Output corpus (newline-delimited JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct MixupArgs {
    /// Source corpus; relative paths also resolve against $MOIRAI_DATA_DIR.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Number of series to generate.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Most series mixed into one output.
    #[arg(long, default_value_t = 4)]
    pub k_max: usize,
    #[arg(long, default_value_t = 128)]
    pub len_min: usize,
    #[arg(long, default_value_t = 4096)]
    pub len_max: usize,
    /// Symmetric Dirichlet concentration of the mixing weights.
    #[arg(long, default_value_t = 1.5)]
    pub concentration: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectionArg {
    Linear,
    Residual,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeArg {
    /// Median rollout; quantiles read directly from the head.
    Direct,
    /// Autoregressive multi-quantile expand→collapse decoding.
    Arq,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossArg {
    Quantile,
    Median,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Training corpus; relative paths also resolve against $MOIRAI_DATA_DIR.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Checkpoint path; metrics go to `<out>.metrics.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON training config; flags given on the command line override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optimizer steps; warmup is a tenth of them.
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Patches per training window.
    #[arg(long, default_value_t = 32)]
    pub ctx_patches: usize,
    /// Fraction of input patches masked per sample.
    #[arg(long, default_value_t = 0.5)]
    pub mask_rate: f64,
    /// Predict several future patches per position.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub multi_token: bool,
    #[arg(long, value_enum, default_value_t = ProjectionArg::Residual)]
    pub projection: ProjectionArg,
    #[arg(long, value_enum, default_value_t = LossArg::Quantile)]
    pub loss: LossArg,
    /// Save an intermediate checkpoint every this many steps.
    #[arg(long)]
    pub ckpt_every: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct ForecastArgs {
    /// Checkpoint to load.
    #[arg(long)]
    pub model: PathBuf,
    /// Series to forecast; relative paths also resolve against $MOIRAI_DATA_DIR.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub horizon: usize,
    #[arg(long, value_enum, default_value_t = DecodeArg::Arq)]
    pub decode: DecodeArg,
    /// Recompute the full sequence at every step instead of caching.
    #[arg(long)]
    pub no_cache: bool,
    /// Forecast from the series minus its last `horizon` points.
    #[arg(long)]
    pub holdout: bool,
    /// Accepted for a uniform interface; decoding is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file of forecast records.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// Checkpoint to load, or `seasonal-naive`.
    #[arg(long)]
    pub model: String,
    /// Task series; the last `horizon` points of each are held out.
    #[arg(long)]
    pub tasks: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub horizon: usize,
    #[arg(long, value_enum, default_value_t = DecodeArg::Arq)]
    pub decode: DecodeArg,
    /// Report CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct BenchArgs {
    /// Checkpoint to load; a freshly initialized default model otherwise.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Context length in values.
    #[arg(long, default_value_t = 2048)]
    pub context: usize,
    /// Horizons to time; repeat the flag for several.
    #[arg(long, default_values_t = [256, 1024])]
    pub horizon: Vec<usize>,
    /// Initialization seed when no checkpoint is given.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON report.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct ReplayArgs {
    /// Manifest written by an earlier run.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write outputs here instead of the recorded `--out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `argv` and runs the selected command.
pub fn run(argv: Vec<String>) -> ExitCode {
    let matches = match Cli::command().try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match dispatch(cli, &matches, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Parses and runs `argv`, folding usage errors into the returned error.
pub fn execute(argv: Vec<String>) -> anyhow::Result<()> {
    let matches = Cli::command().try_get_matches_from(&argv)?;
    let cli = Cli::from_arg_matches(&matches)?;
    dispatch(cli, &matches, argv)
}

fn dispatch(cli: Cli, matches: &ArgMatches, argv: Vec<String>) -> anyhow::Result<()> {
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand required");
    match cli.command {
        Command::Synth(a) => commands::synth(&a, argv),
        Command::Mixup(a) => commands::mixup(&a, argv),
        Command::Train(a) => commands::train(&a, sub, argv),
        Command::Forecast(a) => commands::forecast(&a, argv),
        Command::Eval(a) => commands::eval(&a, argv),
        Command::BenchKv(a) => commands::bench_kv(&a, argv),
        Command::Replay(a) => commands::replay(&a),
    }
}

fn main() -> ExitCode {
    run(std::env::args().collect())
}
