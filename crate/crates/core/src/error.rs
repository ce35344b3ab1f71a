use thiserror::Error;

use crate::transport::TrapSpec;

pub type Result<T, E = TdsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TdsError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("Newton solve did not converge at time step {step} (t = {time:.6e} s) after {iterations} iterations, residual {residual:.3e}")]
    NonConvergence {
        step: usize,
        time: f64,
        iterations: usize,
        residual: f64,
    },

    #[error("simulation failed for trap set {traps:?}: {source}")]
    SimulationFailed {
        traps: Vec<TrapSpec>,
        #[source]
        source: Box<TdsError>,
    },

    #[error("rejection sampling exhausted {attempts} attempts placing trap {trap_index}; configuration is likely infeasible")]
    ExhaustedRetries { trap_index: usize, attempts: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },

    #[error("temperature range mismatch: spectrum covers [{spectrum_min:.2}, {spectrum_max:.2}] K but the model grid is [{grid_min:.2}, {grid_max:.2}] K")]
    RangeMismatch {
        spectrum_min: f64,
        spectrum_max: f64,
        grid_min: f64,
        grid_max: f64,
    },

    #[error("inconsistent datasets: {0}")]
    InconsistentData(String),

    #[error("unsupported format version `{found}` (expected `{expected}`)")]
    VersionMismatch { found: String, expected: String },

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TdsError {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        TdsError::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// Builds a parse error from a serde_json failure, translating its
    /// line/column position into a byte offset within `text`.
    pub fn from_json_error(err: &serde_json::Error, text: &str) -> Self {
        let offset = byte_offset(text, err.line(), err.column());
        TdsError::Parse {
            offset,
            message: err.to_string(),
        }
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}
