//! Command-line driver for conceptlab: data generation, base training,
//! concept erasure, sampling, evaluation and method comparison.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub use commands::{execute, resolve_out_dir, Command, CompareRow};
pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "conceptlab",
    version,
    about = "Concept erasure experiments on toy diffusion models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Sub,
}

#[derive(Debug, Subcommand)]
pub enum Sub {
    /// Draw a labeled dataset from a mixture.
    Datagen(Common),
    /// Train the conditional base denoiser.
    TrainBase(Common),
    /// Fine-tune a base model to forget the target concepts.
    Erase(Common),
    /// Generate samples from a checkpoint.
    Sample(Common),
    /// Compute the metric suite for a checkpoint.
    Eval(Common),
    /// Tabulate erasure methods side by side.
    Compare(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set erase.iterations=500`. Repeatable;
    /// applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

impl Sub {
    fn split(&self) -> (Command, &Common) {
        match self {
            Sub::Datagen(c) => (Command::Datagen, c),
            Sub::TrainBase(c) => (Command::TrainBase, c),
            Sub::Erase(c) => (Command::Erase, c),
            Sub::Sample(c) => (Command::Sample, c),
            Sub::Eval(c) => (Command::Eval, c),
            Sub::Compare(c) => (Command::Compare, c),
        }
    }
}

/// Parses the config, runs the command and returns the output directory.
pub fn run(cli: &Cli) -> Result<PathBuf, CliError> {
    let (command, common) = cli.command.split();
    let cfg = RunConfig::from_file(common.config.as_deref(), &common.set)?;
    let out = resolve_out_dir(&cfg, common.out.as_deref(), command);
    execute(command, &cfg, out)
}

pub fn main_with(cli: &Cli) -> ExitCode {
    match run(cli) {
        Ok(out) => {
            println!("{}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
