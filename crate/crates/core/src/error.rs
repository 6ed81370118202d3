use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("schedule uses {used} slots but capacity is {capacity}")]
    BudgetViolation { used: u64, capacity: u32 },

    #[error("instance too large for exhaustive enumeration (N = {clients}, C = {capacity}; limit N <= {max_clients}, C <= {max_capacity})")]
    SizeGuard {
        clients: usize,
        capacity: u32,
        max_clients: usize,
        max_capacity: u32,
    },

    #[error("index {index} out of range (trace length {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error in `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
