use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FerError {
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("frame i/o error: video {video_id} frame {frame_index}: {msg}")]
    FrameIo {
        video_id: String,
        frame_index: usize,
        msg: String,
    },

    #[error("weight load error: {0}")]
    Load(String),

    #[error("config fingerprint mismatch: checkpoint {found} vs current {expected}")]
    FingerprintMismatch { found: String, expected: String },

    #[error("no valid target: every label in the batch is invalid (-1)")]
    NoValidTarget,

    #[error("evaluation error: {0}")]
    Eval(String),
}

pub type Result<T> = std::result::Result<T, FerError>;

impl FerError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FerError::Io {
            path: path.into(),
            source,
        }
    }
}
