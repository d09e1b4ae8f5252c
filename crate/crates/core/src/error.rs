use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("timestep {t} outside [{lo}, {hi}]")]
    Timestep { t: usize, lo: usize, hi: usize },

    #[error("concept id {id} outside vocabulary of {k} concepts")]
    UnknownConcept { id: usize, k: usize },

    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("training diverged at iteration {iteration}; last good checkpoint: {}", last_good.map_or_else(|| "none".to_string(), |i| i.to_string()))]
    TrainingDiverged {
        iteration: usize,
        last_good: Option<usize>,
    },

    #[error("degenerate covariance (eigenvalue {0:e})")]
    DegenerateCovariance(f64),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("format error: {0}")]
    Format(String),

    #[error("checksum mismatch: expected {expected}, found {found}")]
    Checksum { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}
