use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{what} = {value} is outside {range}")]
    Range {
        what: &'static str,
        value: f64,
        range: &'static str,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate editing direction for {label} (norm {norm:e})")]
    DegenerateDirection { label: String, norm: f64 },

    #[error("non-finite value at {location}")]
    NonFinite { location: String },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Errors caused by the caller's inputs (bad config, missing files) rather
    /// than by a fault inside the library.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Range { .. }
                | Error::Io { .. }
                | Error::Format { .. }
                | Error::DegenerateDirection { .. }
        )
    }
}
