use std::path::PathBuf;

/// Errors produced by the shape-model pipeline.
///
/// Variants are grouped so callers (notably the CLI) can map them onto
/// coarse failure classes: invalid configuration or arguments, file/format
/// problems, and numerical-stage failures on otherwise well-formed data.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("NRRD parse error in field `{field}`: {message}")]
    NrrdParse { field: String, message: String },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("shape mismatch: expected dims {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: [usize; 3],
        actual: [usize; 3],
    },

    #[error("spacing mismatch: {0:?} vs {1:?}")]
    SpacingMismatch([f64; 3], [f64; 3]),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("post-processing emptied the grid at stage `{stage}`")]
    EmptyImplant { stage: String },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse failure class, used by the CLI to pick an exit code.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_) | Error::InvalidSpec(_) | Error::InvalidConfig(_) => {
                ErrorClass::Config
            }
            Error::Io { .. }
            | Error::NrrdParse { .. }
            | Error::UnsupportedFormat(_)
            | Error::Json(_) => ErrorClass::Io,
            Error::ShapeMismatch { .. }
            | Error::SpacingMismatch(..)
            | Error::DegenerateInput(_)
            | Error::DegenerateWeights(_)
            | Error::UndefinedMetric(_)
            | Error::EmptyImplant { .. } => ErrorClass::Numerical,
        }
    }
}

/// Failure classes with distinct CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad configuration, arguments or specs (exit code 2).
    Config,
    /// File system or format problems (exit code 3).
    Io,
    /// Numerical-stage failures on valid inputs (exit code 4).
    Numerical,
}

pub type Result<T> = std::result::Result<T, Error>;
