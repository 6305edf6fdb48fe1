use thiserror::Error;

/// Errors produced by the bitrl library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("unknown environment `{0}`")]
    UnknownEnv(String),

    #[error("step called on a finished episode; reset first")]
    EpisodeDone,

    #[error("rollout failed at step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
