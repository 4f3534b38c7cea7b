//! Command-line harness: data generation, corruption, geometry checks,
//! training, anchor baselines and multi-seed sweeps, each writing a
//! self-describing output directory.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{Command, Invocation};
pub use config::ExperimentConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "volmin", version, about = "Transition-matrix estimation by volume minimization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Experiment config (`section.key = value` lines).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Single seed; overrides `trials.seeds`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Generate a dataset (dataset.csv).
    Generate(CommonArgs),
    /// Corrupt labels, apply anchor removal and balancing (noisy.csv, true_t.txt).
    Corrupt(CommonArgs),
    /// Test the sufficiently-scattered conditions and anchor presence.
    CheckScattered(CommonArgs),
    /// Train classifier and transition jointly.
    TrainVolmin(CommonArgs),
    /// Anchor-point baseline estimates.
    EstimateAnchor(CommonArgs),
    /// Full pipeline over every seed with an aggregate CSV.
    Sweep(CommonArgs),
}

impl CliCommand {
    fn split(self) -> (Command, CommonArgs) {
        match self {
            CliCommand::Generate(a) => (Command::Generate, a),
            CliCommand::Corrupt(a) => (Command::Corrupt, a),
            CliCommand::CheckScattered(a) => (Command::CheckScattered, a),
            CliCommand::TrainVolmin(a) => (Command::TrainVolmin, a),
            CliCommand::EstimateAnchor(a) => (Command::EstimateAnchor, a),
            CliCommand::Sweep(a) => (Command::Sweep, a),
        }
    }
}

/// Loads the config and runs one command. Returns the files written.
pub fn execute(cli: Cli) -> Result<Vec<PathBuf>, CliError> {
    let (cmd, args) = cli.command.split();
    let config = ExperimentConfig::load(&args.config)?;
    let inv = Invocation::new(config, args.out, args.seed);
    commands::run(cmd, &inv)
}
