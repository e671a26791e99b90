use thiserror::Error;

use crate::grid::Cell;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cell ({}, {}) is outside the {width}x{height} grid", cell.row, cell.col)]
    OutOfBounds { cell: Cell, width: u32, height: u32 },

    #[error("pose at ({}, {}) is not a traversable rail pose", cell.row, cell.col)]
    NotRailPose { cell: Cell },

    #[error("map generation failed after {attempts} attempts (seed {seed})")]
    Generation { seed: u64, attempts: u32 },

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("episode already finished at tick {0}")]
    EpisodeFinished(u32),

    #[error("train {train}: {message}")]
    Train { train: usize, message: String },

    #[error("plan divergence at tick {tick}: {message}")]
    PlanDivergence { tick: u32, message: String },

    #[error("trace error: {0}")]
    Trace(String),

    #[error("format version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: String, found: String },

    #[error("seed {seed}: {source}")]
    Seed {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn train(train: usize, message: impl Into<String>) -> Self {
        Error::Train {
            train,
            message: message.into(),
        }
    }

    pub(crate) fn with_seed(self, seed: u64) -> Self {
        Error::Seed {
            seed,
            source: Box::new(self),
        }
    }
}
