//! Scenario-driven front end for the `major-mfg` solvers.
//!
//! Scenario files are parsed by [`scenario`], validated without solving by
//! [`check`], and run by [`exec`], which writes all artifacts of a mode into
//! one output directory.

pub mod check;
pub mod error;
pub mod exec;
pub mod scenario;

use std::path::{Path, PathBuf};

pub use error::CliError;
pub use exec::{execute, Outcome};
pub use scenario::{Mode, Scenario};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "MFGMP_OUT";
pub const DEFAULT_OUT_ROOT: &str = "results";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Run,
    Check,
    /// `run` restricted to the sweep modes.
    Sweep,
}

#[derive(Clone, Debug, Default)]
pub struct Options {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub quiet: bool,
}

pub fn load(path: &Path) -> Result<Scenario, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Scenario::parse(&text)
}

/// Run `f` on a pool of `workers` threads, or on the global pool.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    match workers {
        None => Ok(f()),
        Some(0) => Err(CliError::Usage("--workers must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Usage(format!("cannot start {n} workers: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT), PathBuf::from)
}

/// Execute one command on one scenario file, printing progress unless
/// `quiet`. The returned error carries the exit status.
pub fn dispatch(cmd: Command, file: &Path, opts: &Options) -> Result<(), CliError> {
    let mut sc = load(file)?;
    if let Some(seed) = opts.seed {
        sc.seed = seed;
    }
    match cmd {
        Command::Check => {
            let report = with_workers(opts.workers, || check::check(&sc))?;
            for item in &report.items {
                println!("{item}");
            }
            match report.failures() {
                0 => Ok(()),
                n => Err(CliError::CheckFailed(n)),
            }
        }
        Command::Sweep if !sc.mode.is_sweep() => Err(CliError::Usage(format!(
            "`sweep` runs LAMBDA_SWEEP, EPSILON_SWEEP or REFINE scenarios, not {}",
            sc.mode.name()
        ))),
        Command::Run | Command::Sweep => {
            let dir = exec::output_dir(&sc, file, opts.out.as_deref(), &out_root());
            if !opts.quiet {
                eprintln!("running {} ({}) into {}", file.display(), sc.mode.name(), dir.display());
            }
            let outcome = with_workers(opts.workers, || execute(&sc, &dir))??;
            if !opts.quiet {
                for w in outcome.warnings() {
                    eprintln!("warning: {w}");
                }
                if let Ok(summary) = std::fs::read_to_string(dir.join("summary.txt")) {
                    print!("{summary}");
                }
            }
            Ok(())
        }
    }
}
