use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("triplet sampling: {0}")]
    Sampling(String),
    #[error("privileged channel read in privilege-free mode: {0}")]
    PrivilegedAccess(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
