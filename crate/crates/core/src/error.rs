use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (bad detector index,
    /// unsorted stream, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Configuration failed validation. `field` is the dotted path of the
    /// offending key.
    #[error("invalid configuration `{field}`: {message}")]
    Config { field: String, message: String },

    /// A strategy cannot be used in the requested geometry.
    #[error("constraint violation: {0}")]
    Constraint(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("synchronization failed: {0}")]
    Sync(String),

    #[error("fringe fit failed: {0}")]
    Fit(String),

    #[error("run produced no samples: {0}")]
    Empty(String),

    #[error("malformed data in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("missing run artifacts: {}", .0.join(", "))]
    MissingArtifacts(Vec<String>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid user input rather than by the run
    /// itself.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::Constraint(_) | Error::Contract(_)
        )
    }
}
