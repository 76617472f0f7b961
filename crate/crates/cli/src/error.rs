//! CLI error taxonomy mapped onto exit codes:
//! 0 ok, 2 numeric failure, 64 usage, 65 data format.

use seqfn_core::checkpoint::CheckpointError;
use seqfn_core::data::DataError;
use seqfn_core::metrics::MetricError;
use seqfn_core::model::ModelError;
use seqfn_core::train::TrainError;
use std::fmt;

pub const EXIT_OK: i32 = 0;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_DATA: i32 = 65;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> CliError {
        CliError::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> CliError {
        CliError::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> CliError {
        CliError::Numeric(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> CliError {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> CliError {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> CliError {
        CliError::Data(e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> CliError {
        match e {
            MetricError::NonBinaryTruth { .. } => CliError::Data(e.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> CliError {
        match e {
            TrainError::Data(d) => d.into(),
            TrainError::Metric(m) => m.into(),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::DatasetRow { .. } | TrainError::CorpusSequence { .. } => {
                CliError::Data(e.to_string())
            }
            TrainError::EmptyCorpus | TrainError::MissingSplit { .. } => {
                CliError::Data(e.to_string())
            }
            TrainError::SpecMismatch { .. } => CliError::Usage(e.to_string()),
            TrainError::NonBinaryLabel { .. } => CliError::Data(e.to_string()),
            TrainError::NonFiniteGrad { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }
}
