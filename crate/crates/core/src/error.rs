use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("graph is stale: run forward before calling backward again")]
    StaleGraph,

    #[error("leaf `{0}` is not bound")]
    Unbound(String),

    #[error("masked reduction over an empty mask")]
    EmptyMask,

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("duplicate observation: sample `{sample}`, variable {variable}, t={timestamp}")]
    DuplicateObservation {
        sample: String,
        variable: usize,
        timestamp: f64,
    },

    #[error("sample `{sample}`: query t={query} does not lie after the last event (t={last_event})")]
    NonMonotonicQuery {
        sample: String,
        query: f64,
        last_event: f64,
    },

    #[error("sample `{0}` has no history before the cut")]
    EmptyHistory(String),

    #[error("sample `{0}` has no forecast targets")]
    EmptyTarget(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: checkpoint expects {expected} variables, data has {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite {term} loss at epoch {epoch}, batch {batch}")]
    NumericalAbort {
        term: &'static str,
        epoch: usize,
        batch: usize,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
