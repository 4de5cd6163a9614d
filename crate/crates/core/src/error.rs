use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("size guard: {what} = {value} exceeds limit {limit}")]
    SizeGuard {
        what: &'static str,
        value: usize,
        limit: usize,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("envelope violation at gadget {gadget} (S-magnetization {magnetization}): ratio {ratio} exceeds certified bound {bound}")]
    EnvelopeViolation {
        gadget: usize,
        magnetization: i64,
        ratio: f64,
        bound: f64,
    },
    #[error("stream exhausted after {seen} draws with {accepted} of {wanted} acceptances")]
    Shortfall {
        seen: usize,
        accepted: usize,
        wanted: usize,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn at(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}
