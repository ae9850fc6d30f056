use thiserror::Error;

/// Errors produced by the fitting and evaluation routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("parameter {value} outside the domain [0, 1]")]
    ParameterOutOfDomain { value: f64 },

    #[error("knot vector of length {knots} is inconsistent with {count} control points")]
    KnotMismatch { knots: usize, count: usize },

    #[error("control grid must be at least 4x4, got {rows}x{cols}")]
    GridTooSmall { rows: usize, cols: usize },

    #[error("need at least {required} samples, got {got}")]
    InsufficientSamples { required: usize, got: usize },

    #[error("least-squares system is rank deficient (rank {rank} of {unknowns})")]
    RankDeficient { rank: usize, unknowns: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
