use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient background: {available} samples outside ROIs, need at least {required}")]
    InsufficientBackground { available: usize, required: usize },

    #[error("integrated signal {total:.3} is below -{tolerance} x I_a; baseline is likely misestimated")]
    NegativeSignal { total: f64, tolerance: f64 },

    #[error("under-resolved: {usable} usable Fourier modes, {required} needed for {atoms} atoms")]
    UnderResolved {
        usable: usize,
        required: usize,
        atoms: usize,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("ill-conditioned design: positions {first:.6} px and {second:.6} px are too close")]
    IllConditioned { first: f64, second: f64 },

    #[error("fit did not converge: {0}")]
    NonConvergence(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
