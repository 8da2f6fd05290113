use std::path::PathBuf;

/// Errors raised anywhere in the segmentation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("no cases discovered under {0}")]
    NoCases(PathBuf),

    #[error("case {case}: {modality} file not found")]
    MissingModality { case: String, modality: &'static str },

    #[error("case {case}: shape mismatch dwi={dwi:?} adc={adc:?} mask={mask:?}")]
    ShapeMismatch {
        case: String,
        dwi: Vec<usize>,
        adc: Vec<usize>,
        mask: Vec<usize>,
    },

    #[error("case {case}: {modality} contains non-finite voxels")]
    NonFinite { case: String, modality: &'static str },

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("empty DWI signal")]
    EmptySignal,

    #[error("bounding box {lo:?}..{hi:?} outside volume extent {extent:?}")]
    BoxOutOfRange {
        lo: [usize; 3],
        hi: [usize; 3],
        extent: [usize; 3],
    },

    #[error("volume depth {depth} is smaller than {slices} slices per modality")]
    TooShallow { depth: usize, slices: usize },

    #[error("{path}: corrupt sample file at byte {offset}: {reason}")]
    CorruptSample {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("{path}: corrupt checkpoint at byte {offset}: {reason}")]
    CorruptCheckpoint {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid model config: {0}")]
    InvalidModelConfig(String),

    #[error("invalid train config: {0}")]
    InvalidTrainConfig(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    TensorShape { expected: String, got: String },

    #[error("mask is not binary (found value {0})")]
    NonBinary(f32),

    #[error("empty {0} sample set")]
    EmptySamples(&'static str),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Nifti {
        path: PathBuf,
        #[source]
        source: nifti::NiftiError,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}

impl<T> IoContext<T> for serde_json::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Json {
            path: path.into(),
            source,
        })
    }
}

/// Writes `bytes` to `path` via a sibling temp file and a rename, so readers
/// never observe a partially written file.
pub(crate) fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).at(&tmp)?;
    std::fs::rename(&tmp, path).at(path)
}
