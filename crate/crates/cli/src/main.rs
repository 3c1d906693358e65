use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ggsd_cli::{dispatch, parse_config, CliError, Command, RunOptions};

#[derive(Parser)]
#[command(name = "ggsd", version, about = "Gated group sequential designs for seamless Phase II/III trials")]
struct Cli {
    #[command(subcommand)]
    command: Sub,

    /// Configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the configured replication count.
    #[arg(long, global = true)]
    reps: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for simulation.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Also write patient-level data for the first N replications.
    #[arg(long, global = true, value_name = "N")]
    dump_trials: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Sub {
    /// Boundary tables for every hypothesis of each design.
    Boundaries,
    /// Futility thresholds and their calibration.
    Thresholds,
    /// Monte Carlo operating characteristics.
    Simulate,
    /// Decision traces for observed p-values.
    Analyze,
    /// Merge the tables of earlier simulation runs.
    Report,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let command = match cli.command {
        Sub::Boundaries => Command::Boundaries,
        Sub::Thresholds => Command::Thresholds,
        Sub::Simulate => Command::Simulate,
        Sub::Analyze => Command::Analyze,
        Sub::Report => Command::Report,
    };
    let path = cli
        .config
        .ok_or_else(|| CliError::Usage("--config <path> is required".into()))?;
    let cfg = parse_config(&path)?.with_overrides(cli.seed, cli.reps, cli.out, cli.threads)?;
    let opts = RunOptions {
        config_path: Some(path),
        dump_trials: cli.dump_trials,
    };
    let outcome = dispatch(command, &cfg, &opts)?;
    print!("{}", outcome.summary);
    for f in &outcome.files {
        eprintln!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
