use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lagfx::{par, pipeline, Error};

/// Lag-effect estimation for sequential-job panels.
#[derive(Debug, Parser)]
#[command(name = "lagfx", version)]
struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = "LAGFX_THREADS", default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate lag effects from a panel CSV.
    Analyze {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a simulation study against ground truth.
    Study {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write synthetic panels from a scenario file.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        panels: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<pipeline::Outputs, Error> {
    par::with_threads(cli.threads, || match cli.command {
        Command::Analyze { config } => pipeline::run_analysis(&config),
        Command::Study { config } => pipeline::run_study(&config),
        Command::Simulate {
            scenario,
            panels,
            seed,
            out,
        } => pipeline::run_simulate(&scenario, panels, seed, &out),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(outputs) => {
            for f in outputs.files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
