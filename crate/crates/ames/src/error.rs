use std::io;

use ames_core::training::FitError;
use ames_core::AmesError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] AmesError),

    #[error("training failed: {0}")]
    Fit(String),

    #[error("{0}: {1}")]
    Path(String, #[source] io::Error),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("invalid input: {0}")]
    Input(String),
}

impl From<FitError> for Error {
    fn from(e: FitError) -> Self {
        match e {
            FitError::Ames(e) => Error::Core(e),
            FitError::Diverged { step, .. } => Error::Fit(format!("non-finite loss at step {step}")),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
