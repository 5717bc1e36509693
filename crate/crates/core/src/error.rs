//! Error type shared by every module of the crate.

use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid threshold {0}: must be non-negative")]
    InvalidThreshold(f64),

    #[error("light field has even angular dimension ({theta_u}x{theta_v}); no central view")]
    NoCentralView { theta_u: usize, theta_v: usize },

    #[error("index out of bounds: {0}")]
    Bounds(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate problem: {0}")]
    Degenerate(String),

    #[error("forward cache does not match the parameters passed to backward")]
    StaleCache,

    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} (parameter norms: {param_norms:?})"
    )]
    NonFinite {
        epoch: usize,
        batch: usize,
        param_norms: Vec<f64>,
    },

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("file truncated while reading {0}")]
    Truncated(String),

    #[error("malformed header: {0}")]
    Header(String),

    #[error("inconsistent tensor shape for {name}: {detail}")]
    Shape { name: String, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// True for errors caused by reading or writing files.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::BadMagic { .. }
                | Error::Version { .. }
                | Error::Truncated(_)
                | Error::Header(_)
                | Error::Shape { .. }
        )
    }

    /// True for numerical failures (divergence, degenerate operators).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Degenerate(_))
    }
}
