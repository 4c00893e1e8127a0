use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::DType;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("dtype mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DType {
        op: &'static str,
        lhs: DType,
        rhs: DType,
    },

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("rank {rank} is below the full-rank bound {min_rank}")]
    Rank { rank: usize, min_rank: usize },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("svd did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    Numerical { sweeps: usize, residual: f64 },

    #[error("training diverged at epoch {epoch}, batch {batch} ({phase}): loss = {loss}")]
    Divergence {
        epoch: usize,
        batch: usize,
        phase: &'static str,
        loss: f64,
    },

    #[error("structural mismatch: {0}")]
    Structural(String),

    #[error("archive format error: {0}")]
    Format(String),

    #[error("config error at line {line}, key `{key}`: {msg}")]
    Config {
        line: usize,
        key: String,
        msg: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
