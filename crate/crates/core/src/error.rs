//! Error type shared by every module of the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("degenerate input for {metric}: {reason}")]
    Degenerate {
        metric: &'static str,
        reason: String,
    },

    #[error("training diverged at epoch {epoch}, step {step}: total loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("run `{run}` failed: {source}")]
    Run {
        run: String,
        #[source]
        source: Box<Error>,
    },

    #[error("refusing to overwrite existing directory {0} (pass --overwrite)")]
    Exists(PathBuf),

    #[error("missing artifact {path} for run `{run}`")]
    MissingArtifact { run: String, path: PathBuf },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(arg: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            arg,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether this error should map to a usage/config exit code rather than a runtime one.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument { .. } | Error::Config(_) | Error::Exists(_)
        )
    }
}
