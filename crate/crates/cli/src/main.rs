//! `gfcn`: train, evaluate, transcribe with, and audit the recognizer.

mod commands;
mod run_config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "gfcn", version, about = "Gated fully convolutional handwritten text-line recognizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a run configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Transcribe one graymap image.
    Predict(PredictArgs),
    /// Per-layer parameters, receptive fields and the ending-gate sweep.
    Analyze(AnalyzeArgs),
    /// Train once per normalization kind and tabulate validation CER.
    CompareNorms(CompareArgs),
    /// Render a synthetic dataset split.
    Synth(SynthArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `training.seed`; also seeds weight initialization.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue the run in `--out` from its last checkpoint.
    #[arg(long)]
    pub resume: bool,
    /// Run directory (default `runs/<config-hash>-<unix-time>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Also write the report here, plus a `.tsv` variant alongside.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Scale width with height; use when the model was trained that way.
    #[arg(long)]
    pub preserve_aspect: bool,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    pub image: PathBuf,
    /// Scale width with height; use when the model was trained that way.
    #[arg(long)]
    pub preserve_aspect: bool,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    /// Run configuration whose `[architecture]` is audited (default network
    /// when omitted).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print tab-separated rows instead of the aligned table.
    #[arg(long)]
    pub tsv: bool,
    /// Search bias/width layouts against the reference parameter totals.
    #[arg(long)]
    pub calibrate: bool,
    /// Write `analyze.txt` and `analyze.tsv` into this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epoch horizons for the best-CER columns.
    #[arg(long, value_delimiter = ',', default_value = "50,100,150,200")]
    pub checkpoints: Vec<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Symbols in index order, e.g. "abc de".
    #[arg(long, conflicts_with = "charset")]
    pub symbols: Option<String>,
    /// Charset file instead of `--symbols`.
    #[arg(long)]
    pub charset: Option<PathBuf>,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long, default_value_t = 3)]
    pub min_len: usize,
    #[arg(long, default_value_t = 10)]
    pub max_len: usize,
}

/// Invalid input or usage; maps to exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(err: impl fmt::Display) -> anyhow::Error {
    anyhow::Error::new(UsageError(err.to_string()))
}

/// Tags an error from the validation phase as a usage failure.
pub trait OrUsage<T> {
    fn or_usage(self) -> anyhow::Result<T>;
}

impl<T, E: Into<anyhow::Error>> OrUsage<T> for Result<T, E> {
    fn or_usage(self) -> anyhow::Result<T> {
        self.map_err(|e| usage(format!("{:#}", e.into())))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::CompareNorms(a) => commands::compare_norms(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
