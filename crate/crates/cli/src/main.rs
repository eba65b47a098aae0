//! `magegraph` command-line entry point.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use magegraph_core::Error;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    Synth,
    Preprocess,
    BuildGraph,
    Train,
    Evaluate,
    Calibrate,
    EntropyReport,
}

/// Spatial graph forecasting pipeline.
#[derive(Debug, Parser)]
#[command(name = "magegraph", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set train.epochs=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn run(cli: &Cli) -> magegraph_core::Result<()> {
    let r = config::load(&cli.config, &cli.overrides)?;
    commands::record_config(&r)?;
    match cli.command {
        Command::Synth => commands::synth(&r),
        Command::Preprocess => commands::preprocess(&r),
        Command::BuildGraph => commands::build_graph(&r),
        Command::Train => commands::train(&r),
        Command::Evaluate => commands::evaluate(&r),
        Command::Calibrate => commands::calibrate(&r),
        Command::EntropyReport => commands::entropy(&r),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("magegraph: {e}");
            ExitCode::from(match e {
                Error::Numeric(_) | Error::Backward(_) => 3,
                _ => 2,
            })
        }
    }
}
