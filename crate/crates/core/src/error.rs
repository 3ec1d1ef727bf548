use std::fmt;

/// Where in an input a malformed value was found.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Position {
    Line(usize),
    Byte(u64),
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Position::Line(n) => write!(f, "line {n}"),
            Position::Byte(n) => write!(f, "byte {n}"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("moment (start {start}, duration index {dur}) lies outside a grid of {n} clips")]
    InvalidCoord { start: usize, dur: usize, n: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("{what}: malformed input at {at}: {msg}")]
    Malformed {
        what: &'static str,
        at: Position,
        msg: String,
    },

    #[error("checkpoint does not match model: {}", .0.join(", "))]
    CheckpointMismatch(Vec<String>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn malformed(what: &'static str, at: Position, msg: impl Into<String>) -> Error {
    Error::Malformed {
        what,
        at,
        msg: msg.into(),
    }
}
