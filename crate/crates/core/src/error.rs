use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate batch: batch norm in train mode needs more than one value per channel")]
    DegenerateBatch,

    #[error("validation error: {0}")]
    Validation(String),

    #[error("distance undefined: {0} mask is empty")]
    EmptyMask(&'static str),

    #[error("bad magic header: expected {expected:?}")]
    BadMagic { expected: &'static [u8] },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("non-finite loss term `{term}` at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        term: &'static str,
        epoch: usize,
        step: usize,
    },

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}
