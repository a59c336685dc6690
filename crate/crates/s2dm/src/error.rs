use std::path::Path;

use s2dm_core::CoreError;

/// Every failure the tools report. [`CliError::category`] is the stable,
/// machine-readable tag printed on the single error line.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("{field}: {msg}")]
    Range { field: String, msg: String },
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("{0}")]
    DigestMismatch(String),
    #[error("{path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error("loss became {loss} at step {step}")]
    Divergence { step: usize, loss: f64 },
    #[error("{0} is locked by another process (remove the lock file if stale)")]
    Locked(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn io(path: &Path, err: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            msg: err.to_string(),
        }
    }

    pub fn checkpoint(path: &Path, msg: impl Into<String>) -> Self {
        CliError::Checkpoint {
            path: path.display().to_string(),
            msg: msg.into(),
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Parse { .. } => "parse",
            CliError::UnknownKey { .. } => "unknown-key",
            CliError::Range { .. } => "range",
            CliError::Io { .. } => "io",
            CliError::DigestMismatch(_) => "digest-mismatch",
            CliError::Checkpoint { .. } => "checkpoint",
            CliError::Divergence { .. } => "divergence",
            CliError::Locked(_) => "locked",
            CliError::Core(CoreError::InvalidRange(_)) => "range",
            CliError::Core(CoreError::ConfigMismatch(_)) => "digest-mismatch",
            CliError::Core(_) => "core",
        }
    }

    /// Process exit status; each category gets its own code.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "parse" | "unknown-key" | "range" => 2,
            "io" | "locked" => 3,
            "digest-mismatch" | "checkpoint" => 4,
            "divergence" => 5,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
