//! Command-line runner: configuration, training and evaluation protocols,
//! reports.

pub mod commands;
pub mod config;
pub mod report;

pub use commands::{cmd_ablate, cmd_evaluate, cmd_metrics, cmd_synth, cmd_train, cmd_zero_shot, SynthSpec};
pub use config::{Protocol, RunConfig};
pub use report::{ForecastReport, TrainSummary};

/// Failure classes, each with its own process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Runtime(_) => 4,
        }
    }
}

impl From<timellm::Error> for CliError {
    fn from(e: timellm::Error) -> Self {
        use timellm::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) | E::Template(_) => Self::Config(msg),
            E::Ingestion { .. } | E::InsufficientData(_) | E::Io { .. } | E::Format { .. } => Self::Data(msg),
            E::Dimension { .. } | E::Contract(_) | E::SequenceLength { .. } | E::UndefinedMetric(_) => {
                Self::Runtime(msg)
            }
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
