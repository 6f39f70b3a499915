//! Pipeline commands behind the `jpinn` binary.

pub mod commands;
pub mod config;
pub mod reproduce;

use jpinn::datio::DataError;
use jpinn::ensemble::EnsembleError;
use jpinn::simdata::SimError;
use jpinn::trainer::TrainError;
use thiserror::Error;

pub use config::RunConfig;

/// Command failure, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    /// Prefix the message with `ctx`, keeping the exit code.
    pub fn context(self, ctx: &str) -> Self {
        match self {
            CliError::Config(m) => CliError::Config(format!("{ctx}: {m}")),
            CliError::Data(m) => CliError::Data(format!("{ctx}: {m}")),
            CliError::Numeric(m) => CliError::Numeric(format!("{ctx}: {m}")),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(format!("io: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(format!("csv: {e}"))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Invalid(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Data(d) => d.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let msg = e.to_string();
        match e {
            TrainError::Config(_) => CliError::Config(msg),
            TrainError::Data(_) | TrainError::TooFewObservations(_) | TrainError::Model(_) | TrainError::Io(_) => {
                CliError::Data(msg)
            }
            TrainError::NonFinite { .. } | TrainError::Numeric { .. } | TrainError::Autodiff(_) | TrainError::Net(_) => {
                CliError::Numeric(msg)
            }
        }
    }
}

impl From<EnsembleError> for CliError {
    fn from(e: EnsembleError) -> Self {
        match e {
            EnsembleError::Member { run, source } => CliError::from(source).context(&format!("member {run}")),
            EnsembleError::Data(d) => d.into(),
            EnsembleError::Config(_) => CliError::Config(e.to_string()),
            EnsembleError::Schema(_) | EnsembleError::EmptyPool(_) | EnsembleError::Io(_) | EnsembleError::Csv(_) => {
                CliError::Data(e.to_string())
            }
            EnsembleError::DivisionByZero { .. } | EnsembleError::NonFinite(_) => CliError::Numeric(e.to_string()),
        }
    }
}
