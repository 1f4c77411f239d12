use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the toolkit can report, grouped by the module that raises it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // ingest
    #[error("malformed NIfTI header: {0}")]
    MalformedHeader(String),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("corrupt orientation affine: {0}")]
    CorruptAffine(String),
    #[error("unreadable image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },
    #[error("missing label for {0}")]
    MissingLabel(String),
    #[error("phantom shape {0:?} too small, every axis needs at least 16 voxels")]
    ShapeTooSmall([usize; 3]),
    #[error("invalid manifest: {0}")]
    Manifest(String),

    // context
    #[error("no kept sibling slices for volume {0}")]
    EmptySiblingSet(String),
    #[error("class {0} is absent from the manifest")]
    MissingClass(String),

    // models
    #[error("pretrained weights unavailable: {0}")]
    WeightsUnavailable(String),
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    DivergedLoss {
        epoch: usize,
        /// Completed epochs before the failure.
        history: Vec<crate::models::EpochStats>,
    },
    #[error("empty test set")]
    EmptyTestSet,
    #[error("unsupported layer for export: {0}")]
    UnsupportedLayer(String),
    #[error("invalid model bundle: {0}")]
    Bundle(String),
    #[error("normalization mismatch: bundle uses {bundle}, caller requested {requested}")]
    NormalizationMismatch { bundle: String, requested: String },
    #[error("shape mismatch: {0}")]
    Shape(String),

    // fusion
    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("class mismatch: {0} vs {1} classes")]
    ClassMismatch(usize, usize),
    #[error("empty validation set")]
    EmptyValidation,

    // explain
    #[error("layer {0} not found")]
    LayerNotFound(String),
    #[error("layer {0} has no spatial output")]
    NonConvolutionalLayer(String),

    // config
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
