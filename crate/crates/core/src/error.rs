use std::io;

use thiserror::Error;

/// Decoding failures for the on-disk container format.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: &'static str, found: String },
    #[error("unsupported format version {0} (this build reads version 1)")]
    UnsupportedVersion(u32),
    #[error("malformed header: {0}")]
    Malformed(String),
    #[error("missing header field `{0}`")]
    MissingField(String),
    #[error("invalid value {value:?} for header field `{key}`")]
    InvalidField { key: String, value: String },
    #[error("checksum mismatch: {0}")]
    Checksum(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: String,
        found: String,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("Euler integration produced a non-finite state at step {0}")]
    NonFiniteState(usize),
    #[error("eigensolver did not converge after {0} sweeps")]
    NotConverged(usize),
    #[error("config error: {0}")]
    Config(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Wraps `self` with the name of the harness stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
