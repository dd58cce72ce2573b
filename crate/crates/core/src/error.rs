use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("{context}: pixel ({x}, {y}) outside {w}x{h} sensor")]
    Bounds {
        context: String,
        x: i64,
        y: i64,
        w: usize,
        h: usize,
    },

    #[error("line {line}: quaternion has zero norm")]
    InvalidRotation { line: usize },

    #[error("line {line}: timestamp {t} does not increase over previous {prev}")]
    Ordering { line: usize, t: f64, prev: f64 },

    #[error("need at least 2 groundtruth poses, got {0}")]
    InsufficientGroundtruth(usize),

    #[error("need at least 2 windows to split, got {0}")]
    InsufficientData(usize),

    #[error("{what} = {value} is out of range {range}")]
    Range {
        what: &'static str,
        value: f64,
        range: &'static str,
    },

    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar output, got shape {0:?}")]
    Rank(Vec<usize>),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("degenerate network output: raw quaternion has zero norm")]
    DegenerateOutput,

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for failures caused by non-finite or degenerate numbers rather
    /// than bad input data.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::DegenerateOutput)
    }
}
