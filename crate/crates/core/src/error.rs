use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("softmax row {row} has no unmasked entries")]
    DegenerateRow { row: usize },

    #[error("{op} expects a scalar, got shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },

    #[error("no observed value in the normalization prefix (first {prefix_len} of {len} points)")]
    Normalization { prefix_len: usize, len: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("context of {needed} patches exceeds the maximum of {max}")]
    ContextLength { needed: usize, max: usize },

    #[error("quantile level {0} is outside (0, 1)")]
    InvalidQuantile(f64),

    #[error("every target is masked; the loss has no terms")]
    EmptyLoss,

    #[error("kernel gram matrix is not positive definite even with jitter {jitter:e}")]
    KernelDegenerate { jitter: f64 },

    #[error("no pool series has at least {needed} points")]
    InsufficientPool { needed: usize },

    #[error("series of length {len} is too short (need at least {needed})")]
    InsufficientLength { len: usize, needed: usize },

    #[error("context is too short: {0}")]
    InsufficientContext(String),

    #[error("step {step} outside schedule [0, {total}]")]
    Schedule { step: usize, total: usize },

    #[error("training diverged: non-finite {what} in {param}")]
    Divergence { what: &'static str, param: String },

    #[error("seasonal-naive baseline unavailable: {0}")]
    Baseline(String),

    #[error("MASE undefined: in-sample seasonal differences are all zero")]
    UndefinedMase,

    #[error("cannot aggregate non-positive score {0}")]
    Aggregation(f64),

    #[error("cached and uncached outputs differ by {max_diff:e} (tolerance {tolerance:e})")]
    Correctness { max_diff: f64, tolerance: f64 },

    #[error("{malformed} of {total} corpus records are malformed")]
    CorpusQuality { malformed: usize, total: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("i/o error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
