use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on shapes, ranges or arguments was violated.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A numerical failure: non-finite values, non-convergence, rank deficiency.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// An eigengap fell below the stability threshold of the eigen adjoint.
    #[error("eigengap {gap:e} is below the stability threshold {threshold:e}")]
    Stability { gap: f64, threshold: f64 },
    /// A stateful component was used before it was ready.
    #[error("invalid state: {0}")]
    State(String),
    /// Malformed or incompatible serialized data.
    #[error("format error: {0}")]
    Format(String),
    /// Rejected experiment configuration.
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        match err.kind() {
            csv::ErrorKind::Io(_) => match err.into_kind() {
                csv::ErrorKind::Io(io) => Error::Io(io),
                _ => unreachable!(),
            },
            _ => Error::Format(err.to_string()),
        }
    }
}

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use contract;
