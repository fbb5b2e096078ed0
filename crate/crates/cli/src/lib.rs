//! Command-line driver: dataset generation, training, evaluation, prediction
//! images, training-fraction sweeps, ensembles and disparity probes.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "sbev", version, about = "Stereo bird's-eye-view layout estimation on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train and test sets.
    GenData(CommonArgs),
    /// Train one model.
    Train(CommonArgs),
    /// Evaluate a checkpoint on the test set.
    Eval(CommonArgs),
    /// Write predicted, ground-truth and mask images.
    Predict(CommonArgs),
    /// Train at several training-set fractions.
    SweepFraction(CommonArgs),
    /// Evaluate an ensemble of checkpoints (or train its members first).
    Ensemble(CommonArgs),
    /// Fit disparity probes on frozen checkpoints.
    Probe(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON file with configuration values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Any configuration field as `--key value`, e.g. `--train.epochs 5 --out runs/a`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    pub overrides: Vec<String>,
}

/// Resolves the configuration and runs the command.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let (args, f): (&CommonArgs, fn(&RunConfig) -> Result<(), CliError>) = match &cli.command {
        Command::GenData(a) => (a, commands::gen_data),
        Command::Train(a) => (a, commands::cmd_train),
        Command::Eval(a) => (a, commands::cmd_eval),
        Command::Predict(a) => (a, commands::cmd_predict),
        Command::SweepFraction(a) => (a, commands::cmd_sweep_fraction),
        Command::Ensemble(a) => (a, commands::cmd_ensemble),
        Command::Probe(a) => (a, commands::cmd_probe),
    };
    let cfg = RunConfig::resolve(args.config.as_deref(), &args.overrides)?;
    f(&cfg)
}
