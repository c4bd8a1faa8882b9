use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("window length {l} is not divisible by bin width {d}")]
    BinWidth { l: u64, d: u64 },

    #[error("timestamp {ts} outside window [{start}, {end})")]
    OutOfWindow { ts: i64, start: i64, end: i64 },

    #[error("series too short: length {len}, need at least {min}")]
    SeriesTooShort { len: usize, min: usize },

    #[error("degenerate series: {0}")]
    DegenerateSeries(String),

    #[error("estimator did not converge: {0}")]
    NotConverged(String),

    #[error("insufficient tail: {found} positive values, need at least {min}")]
    InsufficientTail { found: usize, min: usize },

    #[error("degenerate tail: {0}")]
    DegenerateTail(String),

    #[error("empty tail for xmin = {0}")]
    EmptyTail(u64),

    #[error("point ({lat}, {lon}) outside region")]
    OutOfRegion { lat: f64, lon: f64 },

    #[error("out-of-order message {id} at ts {ts}: more than {slack}s behind {latest}")]
    OutOfOrder {
        id: String,
        ts: i64,
        latest: i64,
        slack: i64,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}
