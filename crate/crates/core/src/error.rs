use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A function was evaluated outside its domain (at an atom, inside a
    /// support interval, outside the outlier set, ...).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(
        "fixed-point solver did not converge after {iterations} iterations (last residual {residual:e})"
    )]
    Solver { iterations: usize, residual: f64 },

    /// Root bracketing failed; indicates an inconsistent support profile.
    #[error("internal bracketing failure: {0}")]
    Bracket(String),

    #[error("linear algebra failure: {0}")]
    Linalg(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("trial {index} (seed {seed}, stream {index}) failed: {source}")]
    Trial {
        index: usize,
        seed: u64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for failures of the numerical machinery rather than of the input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Solver { .. } | Error::Bracket(_) | Error::Linalg(_) | Error::Domain(_) => true,
            Error::Trial { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
