use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate triangle (area {area:e})")]
    DegenerateTriangle { area: f64 },

    #[error("mesh has no triangles")]
    EmptyMesh,

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("spatial index is stale (built at revision {index}, mesh is at {mesh})")]
    StaleIndex { index: u64, mesh: u64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no valid pixels to evaluate the loss on")]
    NoValidPixels,

    #[error("stage {stage} requires loss component `{component}`")]
    MissingLossComponent { stage: String, component: String },

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
