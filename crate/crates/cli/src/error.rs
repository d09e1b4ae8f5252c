use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] conceptlab::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 configuration, 3 numeric divergence, 4 I/O or file format.
    pub fn exit_code(&self) -> u8 {
        use conceptlab::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 4,
            CliError::Core(e) => match e {
                E::Config(_)
                | E::Dimension { .. }
                | E::Timestep { .. }
                | E::UnknownConcept { .. }
                | E::Empty(_) => 2,
                E::Divergence(_) | E::TrainingDiverged { .. } | E::DegenerateCovariance(_) => 3,
                E::Format(_) | E::Checksum { .. } | E::Io(_) | E::Json(_) => 4,
            },
        }
    }
}
