use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid mesh: {0}")]
    Mesh(String),

    #[error("node index {index} out of range for mesh with {num_nodes} nodes")]
    NodeIndex { index: usize, num_nodes: usize },

    #[error("cannot add {requested} jumpers: only {available} non-adjacent pairs remain")]
    JumperBudget { requested: usize, available: usize },

    #[error(
        "time step {delta_t} violates the explicit stability limit; use delta_t <= {suggested}"
    )]
    Cfl { delta_t: f64, suggested: f64 },

    #[error("trajectory file header is malformed: {0}")]
    FileHeader(String),

    #[error("trajectory file payload is truncated: {0}")]
    FilePayload(String),

    #[error("trajectory file schema mismatch: {0}")]
    FileSchema(String),

    #[error("trajectory file uses unsupported byte order flag {0}")]
    FileEndianness(u8),

    #[error("checkpoint is malformed: {0}")]
    Checkpoint(String),

    #[error("history feature requires t >= 1 (got t = {0})")]
    NoHistory(usize),

    #[error("attention row {row} has no admitted entries; add self-loops to the adjacency")]
    EmptyAttentionRow { row: usize },

    #[error("degenerate stencil at node {node}: moment matrix min eigenvalue {min_eigenvalue:e}")]
    DegenerateStencil { node: usize, min_eigenvalue: f64 },

    #[error("amplification factor has a pole at theta = {theta}, z = {re} + {im}i")]
    Pole { theta: f64, re: f64, im: f64 },

    #[error("infeasible configuration: {0}")]
    Infeasible(String),

    #[error("non-finite gradient in parameter `{param}` at step {step}")]
    NonFiniteGradient { param: String, step: u64 },

    #[error("rollout diverged at step {step}")]
    Diverged { step: usize },

    #[error("backward was already called on this tape; reset gradients first")]
    BackwardTwice,

    #[error("loss must be a 1x1 tensor, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    IoBare(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
