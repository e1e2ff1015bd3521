use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid profile: {0}")]
    InvalidProfile(String),

    #[error("layer {layer}: expected width {expected}, got {actual}")]
    DimensionMismatch {
        layer: usize,
        expected: usize,
        actual: usize,
    },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("invalid layer range {from}..{to} for depth {depth}")]
    LayerRange { from: usize, to: usize, depth: usize },

    #[error("backward without forward (layer {0})")]
    BackwardWithoutForward(usize),

    #[error("weight update out of order: {0}")]
    PhaseOrder(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("wire format error: {0}")]
    Wire(String),

    #[error("allocation infeasible: {0}")]
    Allocation(String),

    #[error("unknown scheme `{0}`")]
    UnknownScheme(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
