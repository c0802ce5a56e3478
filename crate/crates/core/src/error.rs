use std::path::PathBuf;

/// Errors produced by the simulation engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value is invalid. `field` is a dotted path into the
    /// experiment configuration when one is known.
    #[error("{field}: {message}")]
    Config { field: String, message: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("{path}: row {row}: {message}")]
    Csv {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by invalid user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config { .. } | Error::LabelOutOfRange { .. } | Error::Csv { .. } => true,
            Error::InsufficientData(_) => true,
            Error::Round { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
