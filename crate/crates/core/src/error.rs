//! Crate-wide error type and result alias.

use std::fmt;

pub type Result<T> = std::result::Result<T, ChimeError>;

/// Diagnostics attached to a numerical abort (NaN/Inf loss during training).
#[derive(Debug, Clone, serde::Serialize)]
pub struct AbortDiagnostics {
    /// Training step at which the abort was detected.
    pub step: usize,
    /// Loss value that triggered the abort (serialized as a string since NaN
    /// has no JSON representation).
    pub loss: String,
    /// Histogram of diffusion timesteps drawn in the offending batch.
    pub timestep_histogram: Vec<(usize, usize)>,
    /// L2 gradient norm per parameter group at the last completed step.
    pub grad_norms: std::collections::BTreeMap<String, f64>,
}

#[derive(Debug)]
pub enum ChimeError {
    /// Tensor shapes do not admit the requested operation.
    DimensionMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// Invalid configuration value or combination.
    Config(String),
    /// An operation was called outside its contract (e.g. missing gradient).
    Contract(String),
    /// An object was used before required setup (e.g. untrained encoder).
    State(String),
    /// Too few samples for a statistical computation.
    SampleSize(String),
    /// Metric is undefined for the given input (e.g. single-channel correlation).
    MetricUndefined(String),
    /// Malformed input data with location information.
    Parse {
        path: String,
        row: usize,
        col: usize,
        message: String,
    },
    Io {
        path: String,
        source: std::io::Error,
    },
    /// Training produced a non-finite loss; carries diagnostics for the report.
    Numerical {
        message: String,
        diagnostics: Box<AbortDiagnostics>,
    },
    /// Checkpoint missing, malformed, or incompatible with the requested model.
    Checkpoint(String),
}

impl fmt::Display for ChimeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChimeError::DimensionMismatch { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            ChimeError::Config(msg) => write!(f, "configuration error: {msg}"),
            ChimeError::Contract(msg) => write!(f, "contract violation: {msg}"),
            ChimeError::State(msg) => write!(f, "invalid state: {msg}"),
            ChimeError::SampleSize(msg) => write!(f, "sample size error: {msg}"),
            ChimeError::MetricUndefined(msg) => write!(f, "metric undefined: {msg}"),
            ChimeError::Parse {
                path,
                row,
                col,
                message,
            } => write!(f, "parse error in {path} at row {row}, column {col}: {message}"),
            ChimeError::Io { path, source } => write!(f, "I/O error on {path}: {source}"),
            ChimeError::Numerical { message, .. } => write!(f, "numerical abort: {message}"),
            ChimeError::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
        }
    }
}

impl std::error::Error for ChimeError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            ChimeError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl ChimeError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        ChimeError::Io {
            path: path.into(),
            source,
        }
    }
}
