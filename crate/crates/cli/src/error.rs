use std::fmt;

use duiit_core::Error as CoreError;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_ABORTED: i32 = 3;

/// A command failure together with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn config(error: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_CONFIG, error: error.into() }
    }

    pub fn aborted(error: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_ABORTED, error: error.into() }
    }

    pub fn context(self, msg: impl fmt::Display + Send + Sync + 'static) -> Self {
        Self { code: self.code, error: self.error.context(msg) }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let code = match &e {
            CoreError::InvalidConfig(_)
            | CoreError::UnknownTransform(_)
            | CoreError::ShapeMismatch { .. }
            | CoreError::EmptySplit(_)
            | CoreError::EmptyDataset
            | CoreError::TooFewSamples { .. }
            | CoreError::MissingManifest(_)
            | CoreError::MissingImage { .. }
            | CoreError::CountMismatch { .. }
            | CoreError::UnreadableImage { .. }
            | CoreError::NonFiniteLabel(_)
            | CoreError::Manifest(_)
            | CoreError::InvalidDataset(_)
            | CoreError::Checkpoint(_)
            | CoreError::Report(_) => EXIT_CONFIG,
            CoreError::NonFiniteLoss { .. } => EXIT_ABORTED,
            _ => EXIT_FAILURE,
        };
        Self { code, error: e.into() }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(error: anyhow::Error) -> Self {
        Self { code: EXIT_FAILURE, error }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self { code: EXIT_FAILURE, error: e.into() }
    }
}

pub type CliResult<T> = Result<T, CliError>;
