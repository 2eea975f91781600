//! Crate-wide error type.

/// Errors produced by dataset synthesis, training, generation and evaluation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration value; carries the offending field name.
    #[error("configuration error in `{field}`: {msg}")]
    Config { field: String, msg: String },

    /// Malformed runtime input (shape mismatch, empty batch, unknown name).
    #[error("input error: {0}")]
    Input(String),

    /// Training produced a non-finite loss.
    #[error("training error at epoch {epoch}: {msg}")]
    Training { epoch: usize, msg: String },

    /// Non-finite values encountered during generation or evaluation.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A required artifact (checkpoint, dataset, run file) is absent.
    #[error("missing artifact `{name}`: {hint}")]
    MissingArtifact { name: String, hint: String },

    /// Judge endpoint failures that exhausted retries or were unusable.
    #[error("judge error: {0}")]
    Judge(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image codec error: {0}")]
    Image(String),
}

impl Error {
    pub fn config(field: &str, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            msg: msg.into(),
        }
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    /// Process exit code contract: 1 for configuration problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Input(_) | Error::MissingArtifact { .. } => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
