use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op} at {location}")]
    NonFinite { op: &'static str, location: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("simulation blew up at step {step}: |value| = {magnitude:e}")]
    BlowUp { step: usize, magnitude: f64 },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("sampling produced a non-finite state at diffusion step {step}")]
    SamplingNonFinite { step: usize },

    #[error("misaligned time axes; truth does not cover output times {0:?}")]
    Misaligned(Vec<f64>),

    #[error("malformed {format} file: {detail}")]
    Format { format: &'static str, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing input {}", .0.display())]
    MissingInput(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
