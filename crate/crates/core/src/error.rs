use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed edge or node text. `line` is 1-based.
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("graph has {components} connected components; this operation needs a connected graph")]
    Disconnected { components: usize },

    /// A monitored split-R-hat exceeded its threshold.
    #[error("MCMC did not converge: max split R-hat {max_rhat:.4} exceeds {threshold}")]
    NotConverged { max_rhat: f64, threshold: f64 },

    /// Eigen routine, factorisation or self-check failure.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}

pub(crate) fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
