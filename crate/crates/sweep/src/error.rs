use std::path::PathBuf;

pub type Result<T, E = SweepError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum SweepError {
    #[error(transparent)]
    Core(#[from] cfscale::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{}: expected header {expected:?}, found {found:?}", path.display())]
    Header {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("curve classification needs at least 3 points, got {0}")]
    InsufficientData(usize),
    #[error("invalid sweep configuration: {0}")]
    Config(String),
}

impl SweepError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Self::Csv {
            path: path.into(),
            source,
        }
    }
}
