use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the editing pipeline.
///
/// [`Error::InvalidInput`] covers every rejected-input case (bad shapes,
/// empty lists, out-of-range indices); [`Error::Backend`] covers failures of
/// the pluggable denoiser, codec or encoder.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("backend failure{}: {message}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Backend { step: Option<usize>, message: String },

    #[error("non-finite latent at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("encoder failed on prompt {index}: {message}")]
    Encoder { index: usize, message: String },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn backend(msg: impl Into<String>) -> Self {
        Error::Backend {
            step: None,
            message: msg.into(),
        }
    }

    /// True for errors caused by the caller's input rather than the backend.
    pub fn is_invalid_input(&self) -> bool {
        matches!(self, Error::InvalidInput(_) | Error::Image(_))
    }
}
