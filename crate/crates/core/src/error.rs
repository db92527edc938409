use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{what}: index out of range ({index} >= {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("{0}: non-finite value")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no labeled nodes")]
    NoLabeledNodes,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("degenerate quantile: Q(p) = T = {0}")]
    DegenerateQuantile(usize),

    #[error("class {class} has {available} labeled nodes, needs at least {required}")]
    ClassTooSmall {
        class: usize,
        available: usize,
        required: usize,
    },

    #[error("unreachable target ratio {target}: best achievable is {best}")]
    UnreachableTarget { target: f64, best: f64 },

    #[error("training diverged at epoch {0}: non-finite loss")]
    Diverged(usize),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
