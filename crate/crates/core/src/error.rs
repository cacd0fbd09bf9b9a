// SPDX-License-Identifier: MIT OR Apache-2.0

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported quantization width {0} (expected 4, 8 or 16)")]
    UnsupportedBits(u32),

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("edge {0} is not present in the current mask")]
    MaskedEdge(String),

    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("logits contain NaN")]
    NanLogits,

    #[error("weight file: bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("weight file: unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("weight file truncated: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },

    #[error("weight file checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },

    #[error("weight file: {0} trailing bytes after checksum")]
    TrailingBytes(usize),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("planted task construction failed: {0}")]
    Construction(String),

    #[error("faithfulness undefined: |M_model - M_corrupt| = {0:e} < 1e-9")]
    DegenerateDenominator(f64),

    #[error("scheduler: {0}")]
    Scheduler(String),

    #[error("scheduler watchdog fired after {0:?} waiting on {1}")]
    Deadlock(std::time::Duration, String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
