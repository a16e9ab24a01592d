//! `aicrn`: synthetic ECG corpora, model training, evaluation, prediction,
//! trend reports, and a gradient self-check, from one binary.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<aicrn_core::Error> for CliError {
    fn from(e: aicrn_core::Error) -> Self {
        match e {
            aicrn_core::Error::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

pub type CliResult = Result<(), CliError>;

#[derive(Parser)]
#[command(
    name = "aicrn",
    version,
    about = "Attention-integrated convolutional residual networks for ECG parameter regression"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic labeled ECG corpus
    GenData(GenDataArgs),
    /// Train one model per selected target parameter
    Train(TrainArgs),
    /// Evaluate a checkpoint against labeled records
    Eval(EvalArgs),
    /// Run inference with one or more checkpoints, one CSV column per model
    Predict(PredictArgs),
    /// Turn a predictions CSV into per-parameter trend series and a summary
    Report(ReportArgs),
    /// Finite-difference self-check of every differentiable operation
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Output directory for the corpus
    #[arg(long)]
    pub out: PathBuf,
    /// Number of records to generate
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Additive Gaussian noise, millivolts
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
    /// Record duration, seconds
    #[arg(long, default_value_t = 10.0)]
    pub duration: f64,
    /// Sampling rate, Hz
    #[arg(long, default_value_t = 100.0)]
    pub rate: f64,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Metadata CSV of the training corpus
    #[arg(long)]
    pub data: PathBuf,
    /// Target parameter: pr|qt|qrs|hr|rpa|twa|all
    #[arg(long)]
    pub target: String,
    /// Output directory for checkpoints and logs
    #[arg(long)]
    pub out: PathBuf,
    /// Channel width of the stem and residual modules
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Number of residual modules
    #[arg(long, default_value_t = 8)]
    pub blocks: usize,
    /// Build the ablation variant without attention blocks
    #[arg(long)]
    pub no_attention: bool,
    #[arg(long, default_value_t = 1000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 300)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.0005)]
    pub lr: f64,
    #[arg(long, default_value_t = 20)]
    pub patience: u32,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub dropout: f64,
    #[arg(long, default_value_t = 15)]
    pub stem_kernel: usize,
    #[arg(long, default_value_t = 7)]
    pub block_kernel: usize,
    /// Train on z-scored targets (mapped back for metrics)
    #[arg(long)]
    pub standardize_targets: bool,
    #[arg(long, default_value_t = 0.8)]
    pub train_ratio: f64,
    #[arg(long, default_value_t = 0.1)]
    pub val_ratio: f64,
    #[arg(long, default_value_t = 0.1)]
    pub test_ratio: f64,
    /// Suppress per-epoch progress lines
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    pub model: PathBuf,
    /// Metadata CSV of the evaluation corpus
    #[arg(long)]
    pub data: PathBuf,
    /// Which split of the data to use: train|val|test|all
    #[arg(long, default_value = "all")]
    pub split: String,
    /// Print machine-readable JSON instead of the human summary
    #[arg(long)]
    pub json: bool,
    /// Also write the JSON result to this file
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct PredictArgs {
    /// Checkpoint(s); repeat the flag for one column per model
    #[arg(long, required = true)]
    pub model: Vec<PathBuf>,
    /// Metadata CSV of the records to predict on
    #[arg(long)]
    pub data: PathBuf,
    /// Output CSV path
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Predictions CSV produced by `aicrn predict`
    #[arg(long)]
    pub predictions: PathBuf,
    /// Output directory for per-parameter series and the summary
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenData(args) => commands::gen_data(args),
        Cmd::Train(args) => commands::train(args),
        Cmd::Eval(args) => commands::eval(args),
        Cmd::Predict(args) => commands::predict(args),
        Cmd::Report(args) => commands::report(args),
        Cmd::Gradcheck(args) => commands::gradcheck(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {}", msg);
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {}", msg);
            ExitCode::from(1)
        }
    }
}
