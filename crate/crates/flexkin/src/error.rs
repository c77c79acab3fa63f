use thiserror::Error;

/// Errors produced by the flexkin library.
#[derive(Debug, Error)]
pub enum FlexError {
    /// A tensor or sequence did not have the expected dimensions.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// Expected `distinct_length_count` bone lengths, got something else.
    #[error("expected {expected} distinct bone lengths, got {got}")]
    LengthCountMismatch { expected: usize, got: usize },
    /// A skeleton description violated the tree / mirror / overlap invariants.
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    /// A rotation was not unit-norm within tolerance, or input contained NaN.
    #[error("invalid rotation data: {0}")]
    InvalidRotation(String),
    /// Point at or behind the camera plane; perspective divide is undefined.
    #[error("degenerate projection (|w| <= {0:e})")]
    DegenerateProjection(f64),
    /// Triangulation system is rank deficient (e.g. duplicated views).
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    /// A configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    /// Sequence too short for a temporal operation.
    #[error("sequence too short: need at least {need} frames, got {got}")]
    TooShort { need: usize, got: usize },
    /// A loss or training step produced a non-finite value.
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    /// Malformed BVH text.
    #[error("bvh parse error at line {line}: {msg}")]
    BvhParse { line: usize, msg: String },
    /// Checkpoint manifest and binary blob disagree.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FlexError>;
