use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("invalid window size {0}: patch size must be odd and at least 1")]
    InvalidPatchSize(usize),

    #[error("window center ({row}, {col}) outside {height}x{width} image")]
    OutOfBounds { row: usize, col: usize, height: usize, width: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("noise schedule: {0}")]
    Schedule(String),

    #[error("zero noise variance at step {0} (alpha_bar = 1)")]
    ZeroVariance(usize),

    #[error("alpha_bar = 1 leaves no noise to invert")]
    DegenerateAlphaBar,

    #[error("no consistent patches for border signature {0}")]
    NoConsistentPatches(String),

    #[error("dictionary mismatch: {0}")]
    Dictionary(String),

    #[error("machine configuration: {0}")]
    Config(String),

    #[error("unknown machine variant '{0}'")]
    UnknownVariant(String),

    #[error("scale schedule: {0}")]
    ScaleSchedule(String),

    #[error("non-finite state at step {0}")]
    Diverged(usize),

    #[error("zero-norm vector in cosine similarity")]
    ZeroNorm,

    #[error("reference has zero variance")]
    ConstantReference,

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("bad magic in {path}: expected {expected}, found {found}")]
    BadMagic { path: PathBuf, expected: String, found: String },

    #[error("truncated file {path}: {msg}")]
    Truncated { path: PathBuf, msg: String },

    #[error("unsupported pixel format in {path}: {msg}")]
    UnsupportedPixelFormat { path: PathBuf, msg: String },

    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }

    /// Stable short code used in machine-readable CLI errors.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidPatchSize(_) => "invalid_patch_size",
            Error::OutOfBounds { .. } => "out_of_bounds",
            Error::NonFinite(_) => "non_finite",
            Error::Empty(_) => "empty",
            Error::Schedule(_) => "schedule",
            Error::ZeroVariance(_) | Error::DegenerateAlphaBar => "zero_variance",
            Error::NoConsistentPatches(_) => "no_consistent_patches",
            Error::Dictionary(_) => "dictionary",
            Error::Config(_) => "config",
            Error::UnknownVariant(_) => "unknown_variant",
            Error::ScaleSchedule(_) => "scale_schedule",
            Error::Diverged(_) => "diverged",
            Error::ZeroNorm => "zero_norm",
            Error::ConstantReference => "constant_reference",
            Error::Format { .. } => "format",
            Error::BadMagic { .. } => "bad_magic",
            Error::Truncated { .. } => "truncated",
            Error::UnsupportedPixelFormat { .. } => "unsupported_pixel_format",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }
}
