use thiserror::Error;

use crate::grid::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures of the remote denoiser bridge, kept apart from numeric errors.
#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("bridge timed out after {0:?}")]
    Timeout(std::time::Duration),
    #[error("bridge protocol version mismatch: expected {expected}, got {got}")]
    Version { expected: u16, got: u16 },
    #[error("bridge protocol error: {0}")]
    Protocol(String),
    #[error("remote denoiser reported: {0}")]
    Remote(String),
    #[error("bridge i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: Shape, got: Shape },
    #[error("structural error: {0}")]
    Structural(String),
    #[error("timestep {t} out of range 1..={steps}")]
    Timestep { t: usize, steps: usize },
    #[error("unknown condition token {0:?}")]
    UnknownToken(String),
    #[error("unknown {kind} {name:?} (registered: {known})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        known: String,
    },
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    /// Stable machine-readable code, used by the service's error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Parameter(_) => "invalid_parameter",
            Error::Shape { .. } => "shape_mismatch",
            Error::Structural(_) => "structural",
            Error::Timestep { .. } => "timestep_out_of_range",
            Error::UnknownToken(_) => "unknown_token",
            Error::UnknownStrategy { .. } => "unknown_strategy",
            Error::Bridge(BridgeError::Timeout(_)) => "bridge_timeout",
            Error::Bridge(BridgeError::Version { .. }) => "bridge_version",
            Error::Bridge(_) => "bridge_protocol",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
        }
    }

    /// True when the failure originated outside this process (denoiser bridge).
    pub fn is_upstream(&self) -> bool {
        matches!(self, Error::Bridge(_))
    }
}
