use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dataset has no interactions")]
    EmptyDataset,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("user {user} has interacted with every item; no negative available")]
    NoNegative { user: usize },

    #[error("requested {requested} new interactions but only {available} unobserved pairs exist")]
    Capacity { requested: usize, available: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("graph has {nodes} nodes, above the dense eigendecomposition limit of {limit}")]
    TooLarge { nodes: usize, limit: usize },

    #[error("row {row} has zero norm; cosine similarity is undefined")]
    DegenerateEmbedding { row: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("undefined input: {0}")]
    UndefinedInput(String),

    #[error("reference matrix has numerical rank {rank}, below the requested {requested}")]
    Rank { rank: usize, requested: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
