use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedmoment_cli::{cmd_compare, cmd_run, cmd_sweep, parse_spec};

/// Deterministic grouped sequential federated learning simulator.
#[derive(Parser)]
#[command(name = "fedmoment", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment (or a sweep, when the spec lists one).
    Run {
        /// Path to the experiment spec file.
        spec: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run FedVMR, FedAvg, and a centralized reference on identical data.
    Compare {
        spec: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one experiment per swept group count plus the tradeoff table.
    Sweep {
        spec: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn install_thread_cap() {
    // FEDMOMENT_THREADS caps worker parallelism; results never depend on it.
    if let Ok(value) = std::env::var("FEDMOMENT_THREADS") {
        match value.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
            _ => eprintln!("warning: ignoring invalid FEDMOMENT_THREADS={value}"),
        }
    }
}

fn main() -> ExitCode {
    install_thread_cap();
    let cli = Cli::parse();
    let outcome = (|| -> anyhow::Result<()> {
        let (path, seed, runner): (
            _,
            _,
            fn(&fedmoment_cli::ExperimentSpec) -> anyhow::Result<()>,
        ) = match &cli.command {
            Command::Run { spec, seed } => (spec, seed, cmd_run),
            Command::Compare { spec, seed } => (spec, seed, cmd_compare),
            Command::Sweep { spec, seed } => (spec, seed, cmd_sweep),
        };
        let mut spec = parse_spec(path)?;
        if let Some(seed) = seed {
            spec.seed = *seed;
        }
        runner(&spec)
    })();
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
