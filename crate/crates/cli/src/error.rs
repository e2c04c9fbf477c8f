use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}key `{key}`: {message}", line.map(|l| format!("line {l}, ")).unwrap_or_default())]
    Parse { line: Option<usize>, key: String, message: String },

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Solver(#[from] major_mfg::Error),

    /// The run finished early; the artifacts written so far are kept.
    #[error("run aborted: {0}")]
    Aborted(String),

    #[error("{} hard check(s) failed", .0)]
    CheckFailed(usize),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn parse(line: Option<usize>, key: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Parse {
            line,
            key: key.into(),
            message: message.into(),
        }
    }

    /// 2 for anything wrong with the input, 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } | CliError::Usage(_) => 2,
            CliError::Solver(major_mfg::Error::Validation { .. } | major_mfg::Error::Configuration(_)) => 2,
            _ => 1,
        }
    }
}
