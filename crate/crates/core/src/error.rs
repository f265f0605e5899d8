use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty vector")]
    EmptyVector,

    #[error("no previous-frame tokens")]
    NoPreviousFrameTokens,

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    // -- prompt layout --
    #[error("layout has no segments")]
    EmptyLayout,

    #[error("gap at {0}")]
    LayoutGap(usize),

    #[error("overlap at {0}")]
    LayoutOverlap(usize),

    #[error("empty segment at {0}")]
    EmptySegment(usize),

    #[error("duplicate current frame")]
    DuplicateCurrentFrame,

    #[error("duplicate frame step {0}")]
    DuplicateFrameStep(u32),

    #[error("visual frames present but none has step 0")]
    MissingCurrentFrame,

    #[error("omega {omega} out of range for n = {n}")]
    OmegaOutOfRange { omega: usize, n: usize },

    #[error("temporal scoring requires a current frame")]
    NoCurrentFrame,

    // -- budgets --
    #[error("budget below observation window ({budget} < {omega})")]
    BudgetBelowWindow { budget: usize, omega: usize },

    #[error("empty causal mask")]
    EmptyMask,

    // -- trace files --
    #[error("bad magic: expected GKVT")]
    BadMagic,

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated trace: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("payload length mismatch: header implies {expected} bytes, file has {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("malformed trace: {0}")]
    MalformedTrace(String),

    #[error("trace lacks values")]
    MissingValues,

    #[error("image format: {0}")]
    ImageFormat(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// True for errors caused by malformed input files rather than bad numbers.
    pub fn is_format_error(&self) -> bool {
        matches!(
            self,
            Error::BadMagic
                | Error::UnsupportedVersion(_)
                | Error::Truncated { .. }
                | Error::ChecksumMismatch { .. }
                | Error::LengthMismatch { .. }
                | Error::MalformedTrace(_)
                | Error::ImageFormat(_)
                | Error::Io(_)
        )
    }
}
