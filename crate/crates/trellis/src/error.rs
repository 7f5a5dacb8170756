//! Crate-wide error type.
//!
//! Errors carry enough context to locate the failure: block paths for type
//! and trace errors, `(op, depth)` for kernel failures inside the batched
//! runtime, offending keys and indices where relevant.

/// Any failure produced by this crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("type mismatch at {location}: expected {expected}, found {found}")]
    TypeMismatch {
        location: String,
        expected: String,
        found: String,
    },

    #[error("cannot infer a type at {location}")]
    Underdetermined { location: String },

    #[error("invalid block at {location}: {message}")]
    InvalidBlock { location: String, message: String },

    #[error("composition wiring cycle through node(s) {0:?}")]
    CompositionCycle(Vec<usize>),

    #[error("trace error at {location}: {message}")]
    Trace { location: String, message: String },

    #[error("trace recursion depth limit {limit} exceeded at {location}")]
    TraceDepthLimit { limit: usize, location: String },

    #[error("schedule error: {0}")]
    Schedule(String),

    /// A tensor kernel failed outside any scheduled context.
    #[error("tensor error: {0}")]
    Tensor(String),

    /// A tensor kernel failed while executing a scheduled op group; the
    /// runtime injects the op name and depth.
    #[error("kernel error in op `{op}` at depth {depth}: {message}")]
    Kernel {
        op: String,
        depth: usize,
        message: String,
    },

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Malformed host input fed to a block.
    #[error("input error: {0}")]
    Input(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// Wraps a bare tensor error with the op/depth context of the scheduled
    /// group it occurred in. Other variants pass through unchanged.
    pub(crate) fn in_op(self, op: &str, depth: usize) -> Error {
        match self {
            Error::Tensor(message) => Error::Kernel {
                op: op.to_string(),
                depth,
                message,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
