use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter record or input violates a stated invariant.
    #[error("invalid {what}: {reason}")]
    Validation { what: &'static str, reason: String },

    /// A computation produced a non-finite or degenerate value.
    #[error("numeric failure at {location}: {reason}")]
    Numeric { location: String, reason: String },

    #[error("index out of range: {0}")]
    Index(String),

    /// The sequence cannot host the requested minibatch.
    #[error("cannot place {requested} windows; at most {max_feasible} fit")]
    Capacity { requested: usize, max_feasible: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed input {path}: {reason}")]
    Format { path: String, reason: String },
}

impl Error {
    pub(crate) fn validation(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Validation {
            what,
            reason: reason.into(),
        }
    }

    pub(crate) fn numeric(location: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Numeric {
            location: location.into(),
            reason: reason.into(),
        }
    }

    /// Tags a numeric error with an outer context (e.g. the sampler iteration).
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::Numeric { location, reason } => Error::Numeric {
                location: format!("{ctx}, {location}"),
                reason,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
