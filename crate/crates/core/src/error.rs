use thiserror::Error;

use crate::policy::Phase;
use crate::tools::ToolKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no template matches prompt: {0:?}")]
    UnparseablePrompt(String),

    #[error("malformed agent response: {0}")]
    MalformedResponse(String),

    #[error("box for {caption:?} has non-positive size {w}x{h}")]
    NegativeBoxSize { caption: String, w: i64, h: i64 },

    #[error("layout infeasible: {0}")]
    LayoutInfeasible(String),

    #[error("diff edit {edit} references entry {index}, layout has {len} entries")]
    InvalidDiffIndex { edit: usize, index: usize, len: usize },

    #[error("illegal transition from {from:?}: {reason}")]
    IllegalTransition { from: Phase, reason: String },

    #[error("invalid feedback: {0}")]
    InvalidFeedback(String),

    #[error("box covers no cell at grid resolution {width}x{height}")]
    ZeroAreaAtResolution { width: u32, height: u32 },

    #[error("mask has no set pixels")]
    EmptyMask,

    #[error("mask is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    MaskSizeMismatch { got_w: u32, got_h: u32, want_w: u32, want_h: u32 },

    #[error("cannot average an empty list of embeddings")]
    EmptyInput,

    #[error("embedding length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("invalid embedding: {0}")]
    InvalidEmbedding(String),

    #[error("tool {kind:?} unavailable after {attempts} attempt(s): {last_error}")]
    ToolUnavailable { kind: ToolKind, attempts: u32, last_error: String },

    #[error("request kind {request:?} sent to {endpoint:?} endpoint")]
    KindMismatch { request: ToolKind, endpoint: ToolKind },

    #[error("tool {kind:?} returned error {code}: {message}")]
    ToolFailed { kind: ToolKind, code: String, message: String },

    #[error("invalid tool request: {0}")]
    InvalidRequest(String),

    #[error("artifact codec: {0}")]
    Codec(String),

    #[error("session {0} not found")]
    SessionNotFound(String),

    #[error("session {session} has no artifact {name:?}")]
    ArtifactNotFound { session: String, name: String },

    #[error("storage failure: {0}")]
    StorageFailure(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::StorageFailure(e.to_string())
    }
}
