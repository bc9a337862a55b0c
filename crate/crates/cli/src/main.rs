use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod error;
mod output;

use commands::Estimator;
use error::{CliError, CliResult};

/// Simulate, assemble and estimate reference-dependent migration panels.
#[derive(Debug, Parser)]
#[command(name = "migrate-rum", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Seed recorded in every output; overrides the seed in a world config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic decision panel from a world config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Classify survey rows and expand them into a quasi-panel.
    BuildPanel {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fit an estimator to a panel CSV.
    Estimate {
        #[arg(value_enum)]
        estimator: Estimator,
        #[arg(long)]
        config: PathBuf,
    },
    /// Summarize estimation outputs as Markdown plus curve CSVs.
    Report {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    match &cli.command {
        Command::Simulate { config } => commands::simulate(config, &cli.out, cli.seed),
        Command::BuildPanel { config } => commands::build_panel(config, &cli.out, cli.seed),
        Command::Estimate { estimator, config } => commands::estimate(*estimator, config, &cli.out, cli.seed),
        Command::Report { config } => commands::report(config.as_deref(), &cli.out, cli.seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MIGRATE_RUM_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let err = CliError::Config(e.to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(2);
        }
        Err(e) => {
            // --help and --version.
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
