//! Error type shared across the crate.

/// Errors surfaced by tape construction, distributions and inference.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("value belongs to a different tape")]
    TapeMismatch,

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("value out of support: {0}")]
    OutOfSupport(String),

    #[error("{0} is not reparameterizable")]
    NotReparameterizable(&'static str),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("duplicate name: {0}")]
    DuplicateName(String),

    #[error("binding refers to an unknown random variable: {0}")]
    UnknownBinding(String),

    #[error("missing feed: {0}")]
    MissingFeed(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("empirical store full (T = {0})")]
    StoreFull(usize),

    #[error("builder is not deterministic: two forward evaluations disagree")]
    NonDeterministic,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
