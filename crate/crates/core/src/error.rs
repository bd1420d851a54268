use thiserror::Error;

use crate::autodiff::OpKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch at op {op_index} ({op:?}): {shapes:?}")]
    ShapeMismatch { op_index: usize, op: OpKind, shapes: Vec<Vec<usize>> },
    #[error("non-finite value produced by op {op_index} ({op:?})")]
    NonFinite { op_index: usize, op: OpKind },
    #[error("malformed graph: {0}")]
    InvalidGraph(String),
    #[error("input `{0}` is not bound")]
    UnboundInput(String),
    #[error("unknown node id {0}")]
    UnknownNode(usize),
    #[error("tap not yet populated")]
    NotPopulated,
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("non-finite function value during finite differencing")]
    NonFiniteEvaluation,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("sequence overflow: length {len} exceeds max_seq {max}")]
    SequenceOverflow { len: usize, max: usize },
    #[error("unknown token id {0}")]
    UnknownToken(u32),
    #[error("empty target")]
    EmptyTarget,
    #[error("grid too wide: {patches} patches exceed max_image_patches {max}")]
    GridTooWide { patches: usize, max: usize },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("unsupported character {0:?} in display string")]
    UnsupportedChar(char),
    #[error("{0}")]
    Validation(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("artifact hash mismatch for {path}: manifest {expected}, on disk {actual}")]
    HashMismatch { path: String, expected: String, actual: String },
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 2 for I/O failures and missing artifacts, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::MissingArtifact(_) => 2,
            _ => 1,
        }
    }
}
