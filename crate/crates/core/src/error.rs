use diffcore::DiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },
    #[error("no valid pixels to average over")]
    NoValidPixels,
    #[error("weights do not sum to one (max deviation {0:.3e})")]
    Unnormalized(f64),
    #[error("optimization diverged at iteration {iteration} (loss {loss})")]
    Diverged { iteration: usize, loss: f64, trace: Vec<f64> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
