use std::fmt;
use std::io;

use thiserror::Error;

/// One of the three parameter networks of an NBM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Network {
    /// Bias network, θ.
    Mean,
    /// Log-precision network, φ.
    LogPrecision,
    /// Coupling-weight network, ψ.
    Weights,
}

impl Network {
    pub const ALL: [Network; 3] = [Network::Mean, Network::LogPrecision, Network::Weights];

    /// Short name used for checkpoint array prefixes and metric columns.
    pub fn key(self) -> &'static str {
        match self {
            Network::Mean => "mu",
            Network::LogPrecision => "logp",
            Network::Weights => "w",
        }
    }

    pub fn greek(self) -> &'static str {
        match self {
            Network::Mean => "theta",
            Network::LogPrecision => "phi",
            Network::Weights => "psi",
        }
    }
}

impl fmt::Display for Network {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} network ({})", self.key(), self.greek())
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error in {network}: {detail}")]
    Numeric { network: Network, detail: String },

    #[error("numeric error: {0}")]
    NonFinite(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("length error: expected {expected} bytes, found {found}")]
    Length { expected: usize, found: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// True for the errors a training run aborts on (non-finite values).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric { .. } | Error::NonFinite(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
