use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("volume sidecar not found: {0}")]
    MissingSidecar(PathBuf),
    #[error("raw voxel file has {actual} bytes, expected {expected}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("direction matrix is not orthonormal (max |DᵀD - I| = {0:e})")]
    NonOrthonormalDirection(f64),
    #[error("voxel spacing must be positive, got {0:?}")]
    NonPositiveSpacing([f64; 3]),
    #[error("volume dims must all be >= 2, got {0:?}")]
    InvalidDims([usize; 3]),
    #[error("acoustic impedance must be positive (z1 = {z1}, z2 = {z2})")]
    NonPositiveImpedance { z1: f64, z2: f64 },
    #[error("invalid acoustic lookup table: {0}")]
    InvalidLut(String),
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("no mesh geometry in the region of interest")]
    EmptyRegion,
    #[error("surface walk left the clipped region")]
    LeftRegion,
    #[error("malformed mesh: {0}")]
    Mesh(String),
    #[error("mask has no foreground pixel")]
    EmptyMask,
    #[error("no contour points in any frame")]
    NoPoints,
    #[error("point cloud is degenerate: {0}")]
    DegenerateCloud(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code: 3 for filesystem failures, 2 for everything the
    /// caller can fix by changing inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Image { .. } => 3,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
