//! `epitwin` command line: synthetic data, simulation, calibration,
//! rolling-origin evaluation, model search and intervention sweeps.
//!
//! Exit codes: 0 on success, 1 on a configuration error, 2 on a runtime
//! failure. Artifacts are only written once every one of them is computed.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::CliError;
use crate::config::{keys_help, ConfigError, RunConfig, Section};

#[derive(Parser)]
#[command(name = "epitwin", version, about = "Neural-integrated mechanistic epidemic models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Directory receiving the artifacts.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its hidden truth.
    #[command(after_help = keys_help(Section::Synth))]
    Synth(Common),
    /// Run a program forward under given parameters.
    #[command(after_help = keys_help(Section::Simulate))]
    Simulate(Common),
    /// Fit the calibration network and forecast.
    #[command(after_help = keys_help(Section::Calibrate))]
    Calibrate(Common),
    /// Rolling-origin forecast evaluation.
    #[command(after_help = keys_help(Section::Evaluate))]
    Evaluate(Common),
    /// Search over programs.
    #[command(after_help = keys_help(Section::Evolve))]
    Evolve(Common),
    /// Sweep intervention strengths.
    #[command(after_help = keys_help(Section::Intervene))]
    Intervene(Common),
}

type Handler = fn(&RunConfig) -> Result<output::Artifacts, CliError>;

fn run(command: Command) -> Result<Vec<PathBuf>, CliError> {
    let (common, f): (Common, Handler) = match command {
        Command::Synth(c) => (c, commands::synth),
        Command::Simulate(c) => (c, commands::simulate_cmd),
        Command::Calibrate(c) => (c, commands::calibrate),
        Command::Evaluate(c) => (c, commands::evaluate),
        Command::Evolve(c) => (c, commands::evolve_cmd),
        Command::Intervene(c) => (c, commands::intervene),
    };
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let artifacts = f(&cfg)?;
    log::info!("writing {}", artifacts.names().collect::<Vec<_>>().join(", "));
    artifacts
        .write_all(&common.out)
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", common.out.display())))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(CliError::Config(ConfigError::new("(arguments)", "")).exit_code() as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("epitwin: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
