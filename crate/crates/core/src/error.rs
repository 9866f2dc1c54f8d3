use std::path::PathBuf;

/// Errors raised across the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: String,
        expected: String,
        got: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in `{term}`")]
    NonFinite { term: String },

    #[error("sampling produced a non-finite state at step {step} (t = {t})")]
    Sampling { step: usize, t: f64 },

    #[error(transparent)]
    Config(#[from] crate::io::config::ConfigError),

    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("training aborted at step {step}: {reason} (group dumped to {})", dump.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "<none>".into()))]
    Aborted {
        step: usize,
        reason: String,
        dump: Option<PathBuf>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(what: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            what: what.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by NaN/inf arithmetic rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::Sampling { .. } | Error::Aborted { .. }
        )
    }
}

/// Fails with `NonFinite` naming `term` unless `value` is finite.
pub(crate) fn ensure_finite(term: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { term: term.into() })
    }
}
