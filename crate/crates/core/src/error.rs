use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the engine can report.
///
/// Variants are grouped by the layer that raises them; [`Error::kind`] folds
/// them into the three buckets the command line maps onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("unsupported kernel size {0:?}; only 3x3x3 kernels are supported")]
    KernelSize(Vec<usize>),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph; reset gradients first")]
    BackwardTwice,
    #[error("singular linear system (pivot {pivot:e} at column {column})")]
    Singular { column: usize, pivot: f64 },

    #[error("unknown modality {0}")]
    UnknownModality(String),
    #[error("modality {got} does not match model modality {expected}")]
    ModalityMismatch { expected: String, got: String },
    #[error("unknown category {0}")]
    UnknownCategory(String),
    #[error("duplicate category {0}")]
    DuplicateCategory(String),
    #[error("external embedding set {source_id} is missing category {category}")]
    CoverageGap { source_id: String, category: String },
    #[error("index out of range: {what} {index} (limit {limit})")]
    IndexOutOfRange { what: &'static str, index: usize, limit: usize },
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad NIfTI magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("big-endian NIfTI files are not supported")]
    BigEndian,
    #[error("truncated data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("empty region {0}")]
    EmptyRegion(String),
    #[error("volume already normalized")]
    AlreadyNormalized,
    #[error("missing PET metadata")]
    MissingPetMeta,
    #[error("could not place {0} non-overlapping ellipsoids")]
    Placement(usize),

    #[error("zero variance in series {0}")]
    ZeroVariance(String),
    #[error("training diverged at step {step} (loss {loss}); state dumped to {dump:?}")]
    Diverged { step: usize, loss: f64, dump: Option<PathBuf> },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path:?}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            NonFinite { .. } | Domain { .. } | Singular { .. } | Diverged { .. } | ZeroVariance(_) => ErrorKind::Numerical,
            Config(_) => ErrorKind::Usage,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
