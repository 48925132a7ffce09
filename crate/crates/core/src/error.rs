use thiserror::Error;

/// Error type shared by model construction, evaluation, and fitting.
#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate name: {0}")]
    DuplicateName(String),
    #[error("cycle detected at variable {0}")]
    Cycle(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unknown variable: {0}")]
    UnknownVariable(String),
    #[error("unsupported family: {0}")]
    UnsupportedFamily(String),
    #[error("non-finite log density")]
    NonFinite,
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid model document: {0}")]
    Document(String),
    #[error("consistency check failed: {0}")]
    Consistency(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
