mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use batchcast::Error;
use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("cannot write {0}: {1}")]
    Output(String, std::io::Error),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    /// Stable process exit code: 2 config, 3 data, 4 numerical, 5 compatibility.
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Output(..) => 2,
            CliError::Core(e) => match e {
                Error::Config(_) | Error::InvalidPhi(_) | Error::InvalidLengthscale(_) | Error::InvalidBank(_) => 2,
                Error::Parse { .. }
                | Error::NonUniformSpacing { .. }
                | Error::DuplicateTimestamp { .. }
                | Error::UnsupportedGranularity(_)
                | Error::EmptyTrainSplit(_)
                | Error::SeriesTooShort { .. }
                | Error::HistoryTooShort { .. }
                | Error::TooFewSamples { .. }
                | Error::ZeroDenominator
                | Error::LengthMismatch { .. }
                | Error::Io(_) => 3,
                Error::Checkpoint(_) | Error::ShapeMismatch(_) => 5,
                _ => 4,
            },
        }
    }
}

/// Probabilistic forecasting with batch-correlated Gaussian errors.
#[derive(Debug, Parser)]
#[command(name = "batchcast", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a sinusoid-plus-AR(1) dataset as long CSV.
    Synth(Common),
    /// Train a model and write its checkpoint and loss history.
    Train(Common),
    /// Rolling-origin evaluation of a checkpoint (or the seasonal-naive baseline).
    Evaluate(Common),
    /// Autocorrelation of one-step residuals over the test span.
    Acf(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration (flat JSON object).
    #[arg(long)]
    config: PathBuf,
    /// Override a configuration key; values are parsed as JSON when possible.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory receiving all outputs.
    #[arg(long)]
    out: PathBuf,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("BATCHCAST_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| CliError::Config(format!("BATCHCAST_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("cannot size worker pool: {e}")))
}

type Handler = fn(&ExperimentConfig, &std::path::Path) -> Result<(), CliError>;

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let (common, cmd): (&Common, Handler) = match &cli.command {
        Command::Synth(c) => (c, commands::synth),
        Command::Train(c) => (c, commands::train_cmd),
        Command::Evaluate(c) => (c, commands::evaluate_cmd),
        Command::Acf(c) => (c, commands::acf_cmd),
    };
    let cfg = ExperimentConfig::load(&common.config, &common.overrides)?;
    cmd(&cfg, &common.out)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
