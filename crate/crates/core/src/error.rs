use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("bvh syntax error at line {line}: {message}")]
    BvhSyntax { line: usize, message: String },

    #[error("unsupported channel arrangement for joint '{joint}': {message}")]
    UnsupportedChannels { joint: String, message: String },

    #[error("frame count mismatch: header declares {declared}, found {actual} motion lines")]
    FrameCountMismatch { declared: usize, actual: usize },

    #[error("skeleton/motion mismatch: {0}")]
    SkeletonMismatch(String),

    #[error("incomplete joint mapping: missing {0:?}")]
    IncompleteMapping(Vec<String>),

    #[error("duplicate target assignment: source joint '{0}' mapped more than once")]
    DuplicateMapping(String),

    #[error("joint '{0}' not found in source skeleton")]
    UnknownJoint(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("model has not been trained")]
    UntrainedModel,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("degenerate corpus: {0}")]
    DegenerateCorpus(String),

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Groups errors into the process exit classes used by the CLI:
    /// 1 usage, 2 data, 3 numeric.
    pub fn exit_class(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 1,
            Error::NonFinite(_) => 3,
            _ => 2,
        }
    }
}
