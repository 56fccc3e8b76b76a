//! `octdiff`: synthetic corpora, training, denoising and evaluation for
//! Gamma-noise diffusion despeckling.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use log::LevelFilter;

use crate::config::RunConfig;
use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "octdiff", version, about = "Gamma-noise diffusion despeckling for OCT-like images")]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a paired phantom corpus (clean, noisy, averaged).
    Simulate(commands::simulate::Args),
    /// Train a noise-prediction model on a corpus.
    Train(commands::train::Args),
    /// Denoise one image or a directory of images.
    Denoise(commands::denoise::Args),
    /// Score methods on a corpus and test their differences.
    Evaluate(commands::evaluate::Args),
    /// Write the noise schedule arrays as CSV.
    ScheduleDump(commands::schedule_dump::Args),
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate(a) => commands::simulate::run(a, &mut cfg),
        Command::Train(a) => commands::train::run(a, &mut cfg),
        Command::Denoise(a) => commands::denoise::run(a, &mut cfg),
        Command::Evaluate(a) => commands::evaluate::run(a, &mut cfg),
        Command::ScheduleDump(a) => commands::schedule_dump::run(a, &mut cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => LevelFilter::Warn,
        1 => LevelFilter::Info,
        _ => LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
