use std::path::PathBuf;

use chrono::NaiveDate;
use thiserror::Error;
use volcast_autodiff::AutodiffError;

use crate::black_scholes::PricingError;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}{}: {message}", date.as_ref().map(|d| format!(" ({d})")).unwrap_or_default())]
    Parse {
        line: usize,
        date: Option<String>,
        message: String,
    },
    #[error("unsupported series file version {found} (expected {expected})")]
    UnsupportedVersion { found: String, expected: u32 },
    #[error("cannot build surface for {date}: {message}")]
    Ingest { date: NaiveDate, message: String },
    #[error("grid {date}: {message}")]
    Grid { date: NaiveDate, message: String },
    #[error("{0}")]
    Format(String),
    #[error("series does not cover {what}: need {start}..={end}, have {have}")]
    Coverage {
        what: String,
        start: NaiveDate,
        end: NaiveDate,
        have: String,
    },
    #[error("invalid generator config: {0}")]
    Generator(String),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Pricing(#[from] PricingError),
}

impl ModelError {
    pub(crate) fn config(message: impl Into<String>) -> Self {
        Self::Config(message.into())
    }
}

/// Anything that can stop an experiment, with a process exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("training diverged at epoch {epoch}, step {step}: loss is {loss}; last good parameters kept")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {}: {message}", path.display())]
    Checkpoint { path: PathBuf, message: String },
}

impl Error {
    pub fn config(message: impl Into<String>) -> Self {
        Self::Config(message.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 config, 3 data and I/O, 4 divergence, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Model(ModelError::Config(_)) => 2,
            Self::Data(_) | Self::Io { .. } | Self::Checkpoint { .. } => 3,
            Self::Diverged { .. } => 4,
            Self::Model(_) => 1,
        }
    }
}

impl From<AutodiffError> for Error {
    fn from(e: AutodiffError) -> Self {
        Self::Model(ModelError::Autodiff(e))
    }
}

impl From<PricingError> for Error {
    fn from(e: PricingError) -> Self {
        Self::Model(ModelError::Pricing(e))
    }
}
