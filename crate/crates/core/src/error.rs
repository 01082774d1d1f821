use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("particle {particle} left the grid margin at step {step}")]
    OutOfDomain { particle: usize, step: usize },

    #[error("particle {particle} inverted (det F = {det:e}) at step {step}")]
    Inversion { particle: usize, step: usize, det: f64 },

    #[error("non-finite value in {what} at step {step}")]
    Numeric { what: String, step: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("value {value} outside domain {domain}")]
    Domain { value: f64, domain: &'static str },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error("checkpoint budget too small: {0}")]
    Capacity(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("forward simulation failed at step {step} after {seconds:.3} s: {source}")]
    Forward {
        step: usize,
        seconds: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used by the CLI's single-line errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::OutOfDomain { .. } => "out_of_domain",
            Error::Inversion { .. } => "inversion",
            Error::Numeric { .. } => "numeric",
            Error::Parameter(_) => "parameter",
            Error::Domain { .. } => "domain",
            Error::Config(_) => "config",
            Error::DegenerateDesign(_) => "degenerate_design",
            Error::Capacity(_) => "capacity",
            Error::Fit(_) => "fit",
            Error::Parse { .. } => "parse",
            Error::Format { .. } => "format",
            Error::Validation(_) => "validation",
            Error::Forward { .. } => "forward",
            Error::Io { .. } => "io",
        }
    }
}
