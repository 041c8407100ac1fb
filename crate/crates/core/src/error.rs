use std::path::PathBuf;

use crate::types::HeadId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("no samples")]
    NoSamples,

    #[error("geometry mismatch in sample {sample_id}: {detail}")]
    GeometryMismatch { sample_id: String, detail: String },

    #[error("curve too short: {0} heads, need at least 4")]
    CurveTooShort(usize),

    #[error("unknown head {0}")]
    UnknownHead(HeadId),

    #[error("no foreground in combined map")]
    NoForeground,

    #[error("kernel size {kernel} not allowed for grid {grid} (must be odd and <= {max})")]
    KernelSize { kernel: usize, grid: usize, max: usize },

    #[error("invalid sigma {0}")]
    InvalidSigma(f64),

    #[error("no qualifying heads")]
    NoQualifyingHeads,

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("missing annotation for sample {0}")]
    MissingAnnotation(String),

    #[error("sample {0} has no ground-truth mask")]
    MissingMask(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("{path}: bad magic {found:?}, expected \"LHAD\"")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("{path}: unsupported version {found}, expected 1")]
    UnsupportedVersion { path: PathBuf, found: u16 },

    #[error("{path}: truncated {section}: expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        section: &'static str,
        expected: u64,
        actual: u64,
    },

    #[error("{path}: {count} trailing bytes after payload")]
    TrailingBytes { path: PathBuf, count: u64 },

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("{path}: strict validation failed: {violations:?}")]
    StrictValidation { path: PathBuf, violations: Vec<String> },

    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }
}
