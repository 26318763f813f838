use std::fmt;

use flowpriv::data::DataError;
use flowpriv::detect::DetectError;
use flowpriv::dp::DpError;
use flowpriv::flow::checkpoint::CheckpointError;
use flowpriv::train::TrainError;
use flowpriv::FlowError;

/// Failure classes, one per process exit code.
#[derive(Debug)]
pub enum CliError {
    /// A check ran and failed (exit 1).
    Tolerance(String),
    /// Bad arguments or inputs that cannot be used (exit 2).
    Usage(String),
    /// Missing, unreadable or malformed files (exit 3).
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Tolerance(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn io(msg: impl Into<String>) -> Self {
        CliError::Io(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Tolerance(m) => write!(f, "check failed: {m}"),
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Io(m) => write!(f, "I/O error: {m}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::Config(_) | FlowError::ShapeMismatch { .. } | FlowError::DimMismatch { .. } => {
                CliError::Usage(e.to_string())
            }
            FlowError::NonFinite { .. } | FlowError::Singular { .. } => CliError::Tolerance(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Io(format!("cannot load checkpoint: {e}"))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Usage(m) => CliError::Usage(m),
            other => CliError::Io(other.to_string()),
        }
    }
}

impl From<DpError> for CliError {
    fn from(e: DpError) -> Self {
        match e {
            DpError::Usage(m) => CliError::Usage(m),
            DpError::Format(m) | DpError::Io(m) => CliError::Io(m),
            DpError::Flow(f) => f.into(),
        }
    }
}

impl From<DetectError> for CliError {
    fn from(e: DetectError) -> Self {
        match e {
            DetectError::Usage(m) => CliError::Usage(m),
            DetectError::Format(m) | DetectError::Io(m) => CliError::Io(m),
            DetectError::Flow(f) => f.into(),
            DetectError::Dp(d) => d.into(),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Usage(m) => CliError::Usage(m),
            TrainError::Flow(f) => f.into(),
            other => CliError::Tolerance(other.to_string()),
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;
