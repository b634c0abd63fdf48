// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown weights id `{0}`")]
    UnknownWeights(String),

    #[error("network `{0}` has no residual blocks; In/Pre/Post taps are undefined")]
    NotResidual(String),

    #[error("invalid block address `{addr}`: {reason}")]
    InvalidAddress { addr: String, reason: String },

    #[error("channel {channel} out of range for block {addr} ({channels} channels)")]
    InvalidChannel { addr: String, channel: usize, channels: usize },

    #[error("weights: {0}")]
    Weights(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("config: {0}")]
    Config(String),

    #[error("cache: {0}")]
    Cache(String),

    #[error("expected {expected}x{expected} input, got {height}x{width}")]
    Resolution { expected: usize, height: usize, width: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate objective {0}: gradient was zero at every step")]
    DegenerateObjective(String),

    #[error("ablation: no mean recorded for channel {0}")]
    MissingMean(usize),

    #[error("ablation address mismatch: spec targets {spec}, handle expects {expected}")]
    AddressMismatch { spec: String, expected: String },

    #[error("control pool has {pool} channels, need {k}")]
    PoolTooSmall { pool: usize, k: usize },

    #[error("control screening exhausted after {attempts} candidate sets (best accuracy {best:.4}, bound {bound:.4})")]
    ScreeningExhausted { attempts: usize, best: f64, bound: f64 },

    #[error("report: {0}")]
    Report(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
