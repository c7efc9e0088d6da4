use crate::backbone::BackboneError;
use crate::grid::Shape;

/// Errors raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch for {what}: expected {expected}, found {found}")]
    ShapeMismatch {
        what: String,
        expected: Shape,
        found: Shape,
    },
    #[error("buffer of length {len} cannot hold a {shape} grid")]
    BadBuffer { len: usize, shape: Shape },
    #[error("no valid pixels")]
    EmptyMask,
    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: String, reason: String },
    #[error("scene cannot be rendered: {0}")]
    Unrenderable(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("negative radiance after edit at pixel {index}")]
    NegativeRadiance { index: usize },
    #[error("backbone failure: {0}")]
    Backbone(#[from] BackboneError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(what: impl Into<String>, expected: Shape, found: Shape) -> Self {
        Error::ShapeMismatch {
            what: what.into(),
            expected,
            found,
        }
    }

    pub(crate) fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    /// Prepends `prefix` to the parameter name of an [`Error::InvalidParameter`].
    pub fn prefixed(self, prefix: &str) -> Self {
        match self {
            Error::InvalidParameter { name, reason } => Error::InvalidParameter {
                name: format!("{prefix}{name}"),
                reason,
            },
            other => other,
        }
    }
}
