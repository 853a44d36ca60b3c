//! Error type shared across the library.
//!
//! Every error carries the module it originated from so that front ends can
//! report machine-readable diagnostics; the CLI maps `Invalid` to exit code 2,
//! `Numerical` to 3 and `Io` to 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid input: bad configuration, violated invariant, domain error.
    #[error("[{module}] invalid input: {message}")]
    Invalid {
        module: &'static str,
        message: String,
    },

    /// Numerical failure: non-convergence, range violation, instability.
    #[error("[{module}] numerical error: {message}")]
    Numerical {
        module: &'static str,
        message: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(module: &'static str, message: impl Into<String>) -> Self {
        Error::Invalid {
            module,
            message: message.into(),
        }
    }

    pub fn numerical(module: &'static str, message: impl Into<String>) -> Self {
        Error::Numerical {
            module,
            message: message.into(),
        }
    }

    /// Module the error originated from ("io" for I/O errors).
    pub fn module(&self) -> &'static str {
        match self {
            Error::Invalid { module, .. } | Error::Numerical { module, .. } => module,
            Error::Io(_) => "io",
        }
    }

    /// True for table-range violations that can be cured by rebuilding wider
    /// Hamiltonian tables.
    pub fn is_range_error(&self) -> bool {
        matches!(self, Error::Numerical { message, .. } if message.contains("outside table range"))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
