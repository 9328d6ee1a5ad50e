use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the reconciliation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate hour: psi_plus + psi_minus = 0, no imbalance incentive")]
    DegenerateHour,

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    Dimension {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("reconciled vector is not coherent (max residual {residual:e})")]
    Incoherent { residual: f64 },

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("quantile fit did not converge after {} epochs (initial loss {:.6}, final loss {:.6})", .trace.len(), .trace.first().copied().unwrap_or(f64::NAN), .trace.last().copied().unwrap_or(f64::NAN))]
    NonConvergence { trace: Vec<f64> },

    #[error("training diverged at epoch {epoch}: {reason}")]
    Divergence { epoch: usize, reason: String },

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize, context: &'static str) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            expected,
            got,
            context,
        })
    }
}
