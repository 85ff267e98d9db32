use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{0}: no valid rows to pool over")]
    EmptySet(&'static str),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("wiring error: {0}")]
    Wiring(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("non-finite value detected in tensor `{0}`")]
    Numerical(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("config snapshot mismatch\n--- expected ---\n{expected}\n--- found ---\n{found}")]
    ConfigMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn wiring(msg: impl Into<String>) -> Self {
        Error::Wiring(msg.into())
    }
}
