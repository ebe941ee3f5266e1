use thiserror::Error;

pub type Result<T> = std::result::Result<T, IkodError>;

#[derive(Debug, Error)]
pub enum IkodError {
    #[error("shape mismatch: {lhs_rows}x{lhs_cols} times {rhs_rows}x{rhs_cols}")]
    Shape {
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("cache capacity exceeded: length {len} reached max_seq {max_seq}")]
    Capacity { len: usize, max_seq: usize },

    #[error("invalid sequence layout: {0}")]
    Layout(String),

    #[error("attention row of length {row} does not match layout prefix of length {layout}")]
    LayoutMismatch { row: usize, layout: usize },

    #[error("segment statistics need at least 5 generated tokens, got {0}")]
    UndefinedSegment(usize),

    #[error("sequence lengths are all zero")]
    ZeroLength,

    #[error("invalid KDE input: {0}")]
    Kde(String),

    #[error("attention trace has no row for position {0}")]
    IncompleteTrace(usize),

    #[error("text sequence of length {0} is too short to merge (need at least 3)")]
    TooShort(usize),

    #[error("anchor {anchor} outside merge domain of size {domain}")]
    AnchorOutOfRange { anchor: usize, domain: usize },

    #[error("merge plan does not fit the cache: {0}")]
    BucketOutOfRange(String),

    #[error("vector size mismatch: {0} vs {1}")]
    SizeMismatch(usize, usize),

    #[error("all candidate scores are zero")]
    AllZeroScores,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("CHAIR_I is undefined when no objects are mentioned")]
    NoMentions,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl IkodError {
    /// True for errors caused by running out of cache capacity at runtime.
    pub fn is_capacity(&self) -> bool {
        matches!(self, IkodError::Capacity { .. })
    }
}
