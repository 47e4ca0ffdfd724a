use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("image dimensions must be even, got {width}x{height}")]
    OddDimensions { width: usize, height: usize },
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("no valid points in scene")]
    NoValidPoints,
    #[error("no displacement stored for target frame {0}")]
    MissingTimestamp(usize),
    #[error("pixel ({0}, {1}) is not valid in the source frame")]
    InvalidPixel(usize, usize),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("no model reached consensus with at least 3 inliers")]
    NoConsensus,
    #[error("empty valid set")]
    EmptyValidSet,
    #[error("predicted point {0} has zero norm")]
    ZeroNorm(usize),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("requested {requested} frames with stride {stride}, bundle has {available}")]
    InsufficientFrames {
        requested: usize,
        stride: usize,
        available: usize,
    },
    #[error("index {index} out of range for {len} frames")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("timestamp {got} does not follow {previous}")]
    NonMonotoneTimestamp { previous: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("archive error: {0}")]
    Archive(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
