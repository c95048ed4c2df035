use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crest::runner::config::{ExperimentConfig, Scenario};
use crest::runner::{exit_code, run, EXIT_CONFIG};
use crest::CrestError;

/// Computed decision weights, Gram-spectrum diagnostics and linearized
/// backpropagation experiments.
#[derive(Parser)]
#[command(name = "crest", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Computed decision weights behind 0..L frozen random layers.
    Sweep(Common),
    /// Plain gradient descent on the decision layer over a range of rates.
    Gd(Common),
    /// Preconditioned gradient descent on the decision layer.
    ModifiedGd(Common),
    /// Train the pre-decision layers with linearized backpropagation.
    Train(Common),
    /// Gram traces, trace bound and learnability verdict.
    Diagnose(Common),
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `out` from the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Command {
    fn split(self) -> (Scenario, Common) {
        match self {
            Command::Sweep(c) => (Scenario::Sweep, c),
            Command::Gd(c) => (Scenario::Gd, c),
            Command::ModifiedGd(c) => (Scenario::ModifiedGd, c),
            Command::Train(c) => (Scenario::Train, c),
            Command::Diagnose(c) => (Scenario::Diagnose, c),
        }
    }
}

fn config_for(scenario: Scenario, common: Common) -> crest::Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::from_file(path).map_err(|e| match e {
            CrestError::Io { .. } => CrestError::Config {
                key: "--config".into(),
                message: e.to_string(),
            },
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    config.scenario = scenario;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = common.out {
        config.out = out;
    }
    config.validate()?;
    Ok(config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (scenario, common) = cli.command.split();
    let config = match config_for(scenario, common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("crest: {e}");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    let result = run(&config);
    match &result {
        Ok(summary) => {
            print!("{}", summary.report);
            if let Some(e) = &summary.abort {
                eprintln!("crest: aborted: {e}");
            }
        }
        Err(e) => eprintln!("crest: {e}"),
    }
    ExitCode::from(exit_code(&result) as u8)
}
