use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-positive output extent (input {input}, kernel {kernel}, stride {stride}, padding {padding})")]
    NonPositiveOutput {
        input: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },

    #[error("batch statistics need at least 2 samples per channel, got {0}")]
    DegenerateBatch(usize),

    #[error("dropout rate {0} outside [0, 1)")]
    InvalidRate(f64),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("backward called on an empty tape")]
    EmptyTape,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("probabilities not normalized (worst channel-sum deviation {0:e})")]
    NotNormalized(f64),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("bad NIfTI magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("truncated file: {0}")]
    TruncatedFile(String),

    #[error("unsupported dimensionality dim[0] = {0}")]
    DimensionOverflow(i16),

    #[error("unknown label code {0}")]
    UnknownLabelCode(i64),

    #[error("patch extent {patch:?} exceeds volume extent {volume:?}")]
    PatchTooLarge { patch: [usize; 3], volume: [usize; 3] },

    #[error("case `{0}` has no label volume")]
    MissingLabels(String),

    #[error("patch grid mismatch: {0}")]
    GridMismatch(String),

    #[error("phantom extent {0:?} too small (each axis must be >= 16)")]
    ExtentTooSmall([usize; 3]),

    #[error("empty input")]
    EmptyInput,

    #[error("non-finite loss at step {step}; parameter norms: {diagnostic}")]
    NonFiniteLoss { step: u64, diagnostic: String },

    #[error("missing case `{0}`")]
    MissingCase(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: io::Error },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Errors caused by numerics at run time rather than by bad input or
    /// configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteLoss { .. } | Error::NotNormalized(_) | Error::DegenerateBatch(_)
        )
    }

    /// Adapter for `map_err` that attaches `path` to an IO error.
    pub fn at(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
        move |source| Error::File {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
