use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {found}")]
    Dimension {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("assumption violated: {0}")]
    Assumption(String),

    #[error("validation failed:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("construction of observer {subset} failed: {reason}")]
    Construction { subset: String, reason: String },

    #[error("simulation diverged at step {step}")]
    SimulationDiverged { step: usize },

    #[error("estimator starved at step {step}: every subset deviation is infinite")]
    EstimatorStarved { step: usize },

    #[error("internal consistency: missing estimate for {0}")]
    MissingEstimate(String),

    #[error("calibration failed:\n  {}", .0.join("\n  "))]
    Calibration(Vec<String>),

    #[error("run with config {config_hash} failed: {source}")]
    Run {
        config_hash: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 validation, 2 runtime divergence, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Dimension { .. }
            | Error::Assumption(_)
            | Error::Validation(_)
            | Error::Parse { .. }
            | Error::Construction { .. } => 1,
            Error::SimulationDiverged { .. }
            | Error::EstimatorStarved { .. }
            | Error::MissingEstimate(_)
            | Error::Calibration(_) => 2,
            Error::Io { .. } | Error::Csv(_) => 3,
            Error::Run { source, .. } => source.exit_code(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(context: &str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Dimension {
            context: context.to_string(),
            expected,
            found,
        })
    }
}
