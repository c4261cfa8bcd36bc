use std::path::PathBuf;

use thiserror::Error;

/// Shape and graph errors raised by tensors, kernels, losses and metrics.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch on axis {axis}: expected {expected}, got {actual}")]
    AxisMismatch {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("{op}: {reason}")]
    Precondition { op: &'static str, reason: String },
    #[error("backward called without a cached forward pass")]
    NotCached,
}

/// Model construction and evaluation errors.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(
        "input extent {extent} on axis {axis} is not divisible by {divisor}; pad it to {suggested}"
    )]
    Indivisible {
        axis: &'static str,
        extent: usize,
        divisor: usize,
        suggested: usize,
    },
    #[error(
        "dilated bottleneck needs a receptive field of {receptive_field} voxels but the bottleneck \
         extent on axis {axis} is {extent}; the input extent must be at least {min_input}"
    )]
    ReceptiveField {
        axis: &'static str,
        extent: usize,
        receptive_field: usize,
        min_input: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in parameter `{name}`")]
    NonFiniteGradient { name: String },
    #[error("gradient for `{name}` has shape {actual:?}, parameter has {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("expected {expected} gradients, got {actual}")]
    Count { expected: usize, actual: usize },
}

/// Volume I/O, dataset and patch errors.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed sidecar: {reason}")]
    Sidecar { path: PathBuf, reason: String },
    #[error("{path}: unknown dtype `{dtype}`")]
    UnknownDtype { path: PathBuf, dtype: String },
    #[error("{path}: payload holds {actual} bytes, expected {expected}")]
    PayloadSize {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: label value {value} at voxel {index} is not binary")]
    NonBinaryLabel {
        path: PathBuf,
        index: usize,
        value: f64,
    },
    #[error("{path}: not a NIfTI-1 file: {reason}")]
    NiftiHeader { path: PathBuf, reason: String },
    #[error("{path}: unsupported NIfTI datatype code {code}")]
    NiftiDatatype { path: PathBuf, code: i16 },
    #[error("{path}: gzip-compressed NIfTI is not supported; decompress externally (e.g. `gunzip`)")]
    Compressed { path: PathBuf },
    #[error("image and label shapes differ: {image:?} vs {label:?}")]
    ShapeMismatch { image: [usize; 3], label: [usize; 3] },
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("cannot split {0} ids; at least 3 are required")]
    TooFewIds(usize),
    #[error("patch {patch:?} does not fit in volume {volume:?}")]
    PatchTooLarge { patch: [usize; 3], volume: [usize; 3] },
    #[error("invalid synthetic config: {0}")]
    SynthConfig(String),
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("malformed manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}
