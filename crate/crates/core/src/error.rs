use std::io;

use thiserror::Error;

/// Errors produced by the engine.
///
/// Variants fall into two families that the CLI maps onto distinct exit
/// codes: configuration problems (bad dimensions, out-of-range indices in a
/// request, unknown names) and data problems (corrupt or mismatched files).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("position {position} out of range (max_position = {max})")]
    PositionOutOfRange { position: usize, max: usize },

    #[error("invalid mask: {0}")]
    Mask(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("duplicate index {0}")]
    DuplicateIndex(usize),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// True for errors caused by invalid user-supplied configuration rather
    /// than by bad data on disk.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::PositionOutOfRange { .. }
                | Error::Mask(_)
                | Error::Shape(_)
                | Error::IndexOutOfRange { .. }
                | Error::DuplicateIndex(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
