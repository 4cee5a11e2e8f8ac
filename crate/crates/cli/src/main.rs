mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Failure classes, each with a stable exit code.
#[derive(Debug)]
pub enum CliError {
    /// A check ran and exceeded its tolerance (exit 1).
    Verification(String),
    /// Bad flags, configuration, paths or inputs (exit 2).
    Usage(String),
    /// Non-finite values during a run (exit 3).
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Verification(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Verification(m) => write!(f, "verification failed: {m}"),
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<mmtl_core::Error> for CliError {
    fn from(e: mmtl_core::Error) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mmtl", version, about = "Multimodal multi-task learning with dynamic joint-loss weights")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic emotion/gender dataset.
    Synth(SynthArgs),
    /// Train one configuration and write its curve, checkpoint and manifest.
    Train(TrainArgs),
    /// Train the four comparison configurations for each seed.
    Suite(SuiteArgs),
    /// Run the finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of samples.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML file with generator settings; flags override its values.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub audio_len: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Standard deviation of the audio noise.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Standard deviation of the pixel noise.
    #[arg(long)]
    pub video_noise: Option<f64>,
    /// Output dataset file (MMGD); the manifest goes next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the run seed from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed of the 6:2:2 split.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SuiteArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated run seeds.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    pub seeds: Vec<u64>,
    /// Architecture and shared run settings; defaults to the toy preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed of the 6:2:2 split shared by every configuration.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scope {
    Core,
    Layers,
    Model,
    Lambda,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Scopes to check; all of them when omitted.
    #[arg(long, value_enum)]
    pub scope: Vec<Scope>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Suite(a) => commands::suite(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
