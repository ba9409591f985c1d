use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes that cannot be combined.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A structurally valid call with unusable settings (divisibility,
    /// window sizes, value ranges).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unknown tap `{0}`")]
    UnknownTap(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("corrupt record {index}: label byte {label} is not a class index")]
    CorruptRecord { index: usize, label: u8 },

    #[error("accounting error: {0}")]
    Accounting(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("privacy budget exceeded: epsilon {spent} would pass ceiling {ceiling}")]
    BudgetExceeded { spent: f64, ceiling: f64 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
