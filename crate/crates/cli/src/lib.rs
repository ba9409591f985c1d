//! Batch front end over the `dpsc` library: run configuration, data
//! sources, and the `train`, `account`, `hessian`, `histogram` and
//! `paramcount` commands. Commands write their report to a caller-supplied
//! sink and signal failure through [`CliError`], whose [`CliError::code`] is
//! the process exit status.

pub mod commands;
pub mod config;
pub mod experiment;

use thiserror::Error;

/// Exit status of a successful command.
pub const EXIT_OK: i32 = 0;
/// Unexpected failure (numerical breakdown, output not writable).
pub const EXIT_FAILURE: i32 = 1;
/// Invalid configuration, flags, or tap name.
pub const EXIT_CONFIG: i32 = 2;
/// Dataset or checkpoint could not be loaded or does not fit the model.
pub const EXIT_DATA: i32 = 3;
/// The privacy-budget ceiling would have been passed.
pub const EXIT_BUDGET: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("privacy budget exhausted: {0}")]
    Budget(String),
    #[error("{0}")]
    Failure(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }

    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Budget(_) => EXIT_BUDGET,
            CliError::Failure(_) => EXIT_FAILURE,
        }
    }
}

impl From<dpsc::Error> for CliError {
    fn from(e: dpsc::Error) -> Self {
        use dpsc::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_)
            | E::Dimension(_)
            | E::UnknownTap(_)
            | E::Contract(_)
            | E::Accounting(_)
            | E::Calibration(_) => CliError::Config(msg),
            E::Data(_) | E::Format(_) | E::CorruptRecord { .. } | E::Io(_) => CliError::Data(msg),
            E::BudgetExceeded { .. } => CliError::Budget(msg),
            E::NonFinite(_) => CliError::Failure(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failure(e.to_string())
    }
}
