use std::path::PathBuf;

/// Failures surfaced by the file formats and the command-line front end.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {msg}", path.display())]
    Parse { path: PathBuf, msg: String },
    #[error("{0}")]
    Checkpoint(String),
    #[error(transparent)]
    Core(#[from] cad_core::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Self::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit status: 1 usage, 2 data or IO, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        use cad_core::Error as E;
        match self {
            Self::Usage(_) | Self::Core(E::Config(_)) => 1,
            Self::Core(E::Diverged { .. } | E::NonFinite(_)) => 3,
            _ => 2,
        }
    }
}
