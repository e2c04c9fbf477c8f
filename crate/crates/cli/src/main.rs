use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use major_mfg_cli::{dispatch, Command, Options};

/// Solve mean field games with a major player from scenario files.
#[derive(Parser)]
#[command(name = "major-mfg", version)]
struct Cli {
    /// Output directory (default: $MFGMP_OUT/<scenario>, or results/<scenario>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Print nothing but errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write its artifacts.
    Run { file: PathBuf },
    /// Validate a scenario without solving.
    Check { file: PathBuf },
    /// Run a sweep or refinement scenario.
    Sweep { file: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, file) = match cli.command {
        Cmd::Run { file } => (Command::Run, file),
        Cmd::Check { file } => (Command::Check, file),
        Cmd::Sweep { file } => (Command::Sweep, file),
    };
    let opts = Options {
        out: cli.out,
        seed: cli.seed,
        workers: cli.workers,
        quiet: cli.quiet,
    };
    match dispatch(cmd, &file, &opts) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
