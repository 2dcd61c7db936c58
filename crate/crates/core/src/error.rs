use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Which input of a source/target normalization failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageRole {
    Source,
    Target,
}

impl fmt::Display for ImageRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageRole::Source => f.write_str("source"),
            ImageRole::Target => f.write_str("target"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("malformed raster {path}: {reason}")]
    MalformedRaster { path: PathBuf, reason: String },
    #[error("unsupported pixel layout in {path}: {layout} (expected 8-bit RGB)")]
    UnsupportedBitDepth { path: PathBuf, layout: String },

    #[error("invalid dimensions {width}x{height}")]
    ZeroDimension { width: usize, height: usize },
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("image {width}x{height} is smaller than the {window}x{window} window")]
    ImageSmallerThanWindow {
        width: usize,
        height: usize,
        window: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("stain matrix is rank deficient")]
    RankDeficient,
    #[error("no tissue pixels above the optical density threshold")]
    NoTissue,
    #[error("optical density cloud has rank < 2; cannot separate two stains")]
    DegenerateStains,
    #[error("sparse factorization did not converge after {iters} iterations (relative change {rel_change:.3e})")]
    NonConvergence { iters: usize, rel_change: f64 },
    #[error("stain estimation failed for {role} image: {source}")]
    Estimation {
        role: ImageRole,
        #[source]
        source: Box<Error>,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("weight file: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("weight file: unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("weight file: truncated ({0})")]
    Truncated(String),
    #[error("weight file: checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("weight file: missing tensor `{0}`")]
    MissingTensor(String),
    #[error("weight file: duplicate tensor `{0}`")]
    DuplicateTensor(String),
    #[error("weight file: unexpected tensor `{0}`")]
    UnexpectedTensor(String),
    #[error("weight file: tensor `{0}` contains a non-finite value")]
    NonFinite(String),
    #[error("weight file: tensor `{name}` has spectral norm {sigma:.6} > 1")]
    SpectralNormViolation { name: String, sigma: f64 },
    #[error("weight file: bad metadata: {0}")]
    BadMetadata(String),

    #[error("probability {0} outside (0, 1) in cross-entropy mode")]
    ProbabilityOutOfRange(f64),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("incomplete batch bundle: {0}")]
    IncompleteBundle(String),

    #[error("missing patch at grid (row {row}, col {col})")]
    MissingPatch { row: usize, col: usize },
    #[error("duplicate patch at grid (row {row}, col {col})")]
    DuplicatePatch { row: usize, col: usize },
    #[error("{} patch(es) failed; first at (row {}, col {}): {}", .0.len(), .0[0].row, .0[0].col, .0[0].message)]
    PatchFailures(Vec<PatchFailure>),
}

/// A normalization failure tied to one grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFailure {
    pub row: usize,
    pub col: usize,
    pub message: String,
}
