use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("clip {clip_id} is already in local coordinates")]
    AlreadyLocal { clip_id: String },

    #[error("invalid time interval [{start_s}, {end_s}): {reason}")]
    InvalidInterval {
        start_s: f64,
        end_s: f64,
        reason: String,
    },

    #[error("clip {clip_id} is invalid: {details}")]
    InvalidClip { clip_id: String, details: String },

    #[error("annotation {video_id} [{start_s}, {end_s}) is invalid: {reason}")]
    InvalidAnnotation {
        video_id: String,
        start_s: f64,
        end_s: f64,
        reason: String,
    },

    #[error("annotation references unknown video {0:?}")]
    UnknownVideo(String),

    #[error("records do not share one (video_id, start_s, end_s) key")]
    MismatchedKeys,

    #[error("nothing to merge")]
    EmptyGroup,

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("sequence cap exceeded: {what} has length {len}, cap is {cap}")]
    CapExceeded {
        what: &'static str,
        len: usize,
        cap: usize,
    },

    #[error("invalid target sequence: {0}")]
    InvalidTarget(String),

    #[error("invalid training setup: {0}")]
    Precondition(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("corpus lists have different lengths ({candidates} candidates, {references} references)")]
    LengthMismatch { candidates: usize, references: usize },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
