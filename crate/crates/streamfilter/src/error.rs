use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration values (non-positive variances, bad grids, ...).
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller violated an operation's contract.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Malformed input row in a delimited text file.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    /// All particle weights underflowed to zero.
    #[error("degenerate particle weights: all weights are zero")]
    DegenerateWeights,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
