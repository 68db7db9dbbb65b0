//! `homog`: command-line driver for cell problems, fine and homogenized runs, corrector
//! sweeps, bound constants, the oscillation check and the corrosion preset.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration error, 3 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Failure classes, each with its own exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "homog", version, about = "Periodic homogenization of pseudo-parabolic systems in perforated domains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Solve the cell problems and tabulate effective tensors.
    Cell,
    /// Run the fine problem on the perforated domain.
    Fine,
    /// Run the homogenized problem.
    Macro,
    /// Corrector error sweep over several epsilons.
    Sweep,
    /// Sample norms, choose weights and report bound constants and rate tables.
    Constants,
    /// Convergence of oscillating integrals to their cell averages.
    Oscillation,
    /// Build the corrosion preset and report its matrices and checks.
    Corrosion,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Cell => "cell",
            Command::Fine => "fine",
            Command::Macro => "macro",
            Command::Sweep => "sweep",
            Command::Constants => "constants",
            Command::Oscillation => "oscillation",
            Command::Corrosion => "corrosion",
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            config::Config::parse(&text)?
        }
        None => config::Config::default(),
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    std::fs::create_dir_all(&cli.out)?;
    commands::write_manifest(&cli.out, cli.command.name(), &cfg)?;
    let out = &cli.out;
    match cli.command {
        Command::Cell => commands::cell(&cfg, out),
        Command::Fine => commands::fine(&cfg, out),
        Command::Macro => commands::macro_run(&cfg, out),
        Command::Sweep => commands::sweep(&cfg, out),
        Command::Constants => commands::constants(&cfg, out),
        Command::Oscillation => commands::oscillation(&cfg, out),
        Command::Corrosion => commands::corrosion(&cfg, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("homog: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
