use std::path::PathBuf;

use crate::config::Violation;

/// Failures surfaced by the command line, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid configuration:\n{}", format_violations(.0))]
    Invalid(Vec<Violation>),

    #[error("missing {}: run `accentkit {command}` first", .path.display())]
    MissingArtifact { path: PathBuf, command: &'static str },

    #[error("run directory {} is locked by another command ({})", .path.display(), .holder)]
    Locked { path: PathBuf, holder: String },

    #[error(transparent)]
    Core(#[from] accentkit_core::Error),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

fn format_violations(violations: &[Violation]) -> String {
    violations.iter().map(|v| format!("  {v}")).collect::<Vec<_>>().join("\n")
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Invalid(_) => 2,
            CliError::MissingArtifact { .. } => 3,
            CliError::Core(accentkit_core::Error::Validation { .. }) => 2,
            CliError::Locked { .. } | CliError::Core(_) | CliError::Io { .. } => 4,
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
