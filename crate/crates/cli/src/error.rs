use std::path::Path;

use polguide::backbone::BackboneError;
use polguide::guidance::RefineError;

use crate::pfm::PfmError;

/// Failure of a command, classified by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Bridge(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numeric(_) => 1,
            CliError::Io(_) => 2,
            CliError::Config(_) => 3,
            CliError::Bridge(_) => 4,
        }
    }

    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<polguide::Error> for CliError {
    fn from(e: polguide::Error) -> Self {
        use polguide::Error as E;
        let msg = e.to_string();
        match e {
            E::Backbone(b) => b.into(),
            E::InvalidParameter { .. } | E::Unrenderable(_) => CliError::Config(msg),
            E::ShapeMismatch { .. } | E::BadBuffer { .. } => CliError::Io(msg),
            _ => CliError::Numeric(msg),
        }
    }
}

impl From<BackboneError> for CliError {
    fn from(e: BackboneError) -> Self {
        match e {
            BackboneError::ShapeMismatch { .. } => CliError::Io(e.to_string()),
            _ => CliError::Bridge(e.to_string()),
        }
    }
}

impl From<RefineError> for CliError {
    fn from(e: RefineError) -> Self {
        let step = e.step;
        match CliError::from(e.source) {
            CliError::Numeric(m) => CliError::Numeric(format!("step {step}: {m}")),
            CliError::Bridge(m) => CliError::Bridge(format!("step {step}: {m}")),
            other => other,
        }
    }
}

impl From<PfmError> for CliError {
    fn from(e: PfmError) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
