use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use trajgp_cli::commands;
use trajgp_cli::config::{Command, RunConfig};
use trajgp_cli::{CliError, Result};

#[derive(Parser)]
#[command(name = "trajgp", version, about = "Bayesian temporal GP regression along individual trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Write a synthetic dataset and its generating truth.
    Simulate,
    /// Run the sampler and stream the chain to disk.
    Fit,
    /// Predict held-out (or in-sample) rows from a stored chain.
    Predict,
    /// Summarise coefficients and the fitted spatial surface.
    Report,
}

fn run(cli: &Cli) -> Result<()> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    if let Some(out) = &cli.output {
        cfg.output = Some(out.clone());
    }
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let command = match cli.command {
        Cmd::Simulate => Command::Simulate,
        Cmd::Fit => Command::Fit,
        Cmd::Predict => Command::Predict,
        Cmd::Report => Command::Report,
    };
    cfg.validate(command)?;
    match command {
        Command::Simulate => commands::simulate(&cfg),
        Command::Fit => commands::fit(&cfg).map(|s| log::info!("fit done: acceptance {:.3}, DIC {:.1}", s.acceptance_rate, s.dic)),
        Command::Predict => commands::predict_cmd(&cfg).map(|m| log::info!("coverage {:.3}, rmspe {:.4}", m.coverage, m.rmspe)),
        Command::Report => commands::report(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
