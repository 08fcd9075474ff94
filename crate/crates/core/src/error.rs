use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),

    #[error("layer {index} rejected input: {detail}")]
    LayerMismatch { index: String, detail: String },

    #[error("training diverged at epoch {epoch}: loss became non-finite")]
    Diverged { epoch: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("bad magic at byte {offset}: found {found:#010x}, expected {expected:#010x}")]
    BadMagic { offset: u64, found: u32, expected: u32 },

    #[error("truncated file: needed {needed} bytes, only {got} available")]
    Truncated { needed: usize, got: usize },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("record misalignment: file size {size} is not a multiple of {record}-byte records")]
    RecordMisaligned { size: usize, record: usize },

    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("checksum mismatch for tensor '{0}'")]
    ChecksumMismatch(String),

    #[error("payload disagreement for tensor '{name}': metadata declares {declared} values, payload holds {actual}")]
    PayloadMismatch {
        name: String,
        declared: usize,
        actual: usize,
    },

    #[error("label {label} out of range [0, {classes})")]
    LabelOutOfRange { label: i64, classes: usize },

    #[error("output directory is locked by another run ({0})")]
    Locked(String),

    #[error("malformed document: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
