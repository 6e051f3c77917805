use thiserror::Error;

/// Errors surfaced by the simulator, the trace generator and the model.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("TMU tensor table full ({capacity} entries)")]
    TensorTableFull { capacity: usize },

    #[error("tensor region [{base:#x}, {end:#x}) overlaps a registered tensor")]
    TensorOverlap { base: u64, end: u64 },

    #[error("simulation invariant violated: {0}")]
    Invariant(String),

    #[error("simulation did not finish within {0} cycles")]
    Timeout(u64),

    #[error("analysis error: {0}")]
    Analysis(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// Stable machine-readable category, used for CLI exit codes and
    /// per-row failure records in sweeps.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::TensorTableFull { .. } | Error::TensorOverlap { .. } => {
                "config"
            }
            Error::Invariant(_) | Error::Timeout(_) => "simulation",
            Error::Analysis(_) => "analysis",
            Error::Io(_) | Error::Csv(_) => "io",
            Error::Parse(_) => "parse",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
