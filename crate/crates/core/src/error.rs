use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    Param { field: &'static str, reason: String },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("timestep {t} out of range [1, {max}]")]
    Timestep { t: usize, max: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value in `{term}`")]
    NonFinite { term: String },

    #[error("backend error{}: {message}", .identity.map(|i| format!(" (identity {i})")).unwrap_or_default())]
    Backend {
        identity: Option<usize>,
        message: String,
    },

    #[error("integration backend unavailable: {0}")]
    Integration(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error at key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Param {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Shape {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}
