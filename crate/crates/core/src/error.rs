use crate::field::Domain;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("timestep {t} out of range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("domain mismatch: expected {expected}, found {found}")]
    DomainMismatch { expected: Domain, found: Domain },
    #[error("value {value} at ({row}, {col}) lies outside the {domain} domain")]
    OutOfDomain {
        value: f64,
        row: usize,
        col: usize,
        domain: Domain,
    },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("image too small: {height}x{width}, need at least {min_height}x{min_width}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        min_height: usize,
        min_width: usize,
    },
    #[error("Newton solve did not converge after {iters} iterations (guide {guide}, anchor {anchor}, mu {mu})")]
    NonConvergence {
        iters: usize,
        guide: f64,
        anchor: f64,
        mu: f64,
    },
    #[error("non-finite training loss at iteration {iteration}: {loss}")]
    NonFiniteLoss { iteration: usize, loss: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("unsupported image {path}: {reason}")]
    UnsupportedImage { path: String, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("schedule mismatch: {0}")]
    ScheduleMismatch(String),
    #[error("backend failure: {0}")]
    Backend(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("png decode: {0}")]
    PngDecode(#[from] png::DecodingError),
    #[error("png encode: {0}")]
    PngEncode(#[from] png::EncodingError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidParameter(_)
            | Error::TimestepOutOfRange { .. }
            | Error::ScheduleMismatch(_) => ErrorKind::Config,
            Error::NonConvergence { .. } | Error::NonFiniteLoss { .. } => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
