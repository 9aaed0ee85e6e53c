use std::io;

use thiserror::Error;

use crate::geometry::ImageShape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("mask is empty")]
    EmptyMask,
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: ImageShape, found: ImageShape },
    #[error("frame {frame}: cell {id} references parent {parent} which does not exist")]
    BrokenLink { frame: usize, id: u32, parent: u32 },
    #[error("not a tensor file (bad magic)")]
    NotATensorFile,
    #[error("corrupt tensor file: {0}")]
    CorruptFile(String),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("image has zero size")]
    EmptyImage,
    #[error("channel overfull: initial cells need {needed} px but the channel has {available}")]
    ChannelOverfull { needed: usize, available: usize },
    #[error("non-finite value in input")]
    NonFiniteInput,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("image values must lie in [0, 1]")]
    InputRange,
    #[error("geometric constraints unsatisfiable after {0} draws")]
    ConstraintUnsatisfiable(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyMask => "EmptyMask",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::BrokenLink { .. } => "BrokenLink",
            Error::NotATensorFile => "NotATensorFile",
            Error::CorruptFile(_) => "CorruptFile",
            Error::UnsupportedDtype(_) => "UnsupportedDtype",
            Error::EmptyImage => "EmptyImage",
            Error::ChannelOverfull { .. } => "ChannelOverfull",
            Error::NonFiniteInput => "NonFiniteInput",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::InputRange => "InputRange",
            Error::ConstraintUnsatisfiable(_) => "ConstraintUnsatisfiable",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }

    /// True for failures of the environment rather than of the input data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}
