use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("timestep {t} outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("posterior needs t >= 2, got t = {0}; use the terminal rule at t = 1")]
    PosteriorAtTerminal(usize),
    #[error("noise must be zero at the terminal step t = 1")]
    TerminalNoise,
    #[error("invalid timestep sequence: {0}")]
    InvalidTimesteps(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("missing image/mask pair for `{0}`")]
    MissingPair(String),
    #[error("image `{path}`: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status: 1 usage or configuration, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::InvalidSchedule(_) | Error::InvalidTimesteps(_) => 1,
            Error::Data(_)
            | Error::MissingPair(_)
            | Error::Image { .. }
            | Error::Checkpoint(_)
            | Error::CheckpointVersion { .. }
            | Error::Io(_)
            | Error::Json(_) => 2,
            Error::TimestepOutOfRange { .. }
            | Error::PosteriorAtTerminal(_)
            | Error::TerminalNoise
            | Error::Shape(_)
            | Error::UndefinedMetric(_)
            | Error::NonFinite { .. } => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(what: impl Into<String>) -> Error {
    Error::Shape(what.into())
}
