//! On-disk formats: binary depth maps, pointmaps and correspondence sets,
//! the JSON scene manifest, the JSON result document, and PLY export.
//!
//! Every binary format is little-endian with a 12-byte common prefix:
//! 4-byte magic, `u16` version (= 1), `u16` reserved.

mod binary;
mod corr;
mod depth;
mod manifest;
mod ply;
mod result;

pub use corr::{read_correspondences, write_correspondences, CorrespondenceSet, Match};
pub use depth::{read_depth, read_pointmap, write_depth, write_pointmap, DepthMap, PointMap};
pub use manifest::{
    load_scene, FrameEntry, IntrinsicsEntry, PairEntry, SceneData, SceneFrame, SceneManifest,
};
pub use ply::{export_ply, write_ply, PlyFrame};
pub use result::{
    read_result, write_result, FrameRecord, HistogramSummary, ResultDocument, RunMetadata,
};

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated file: need {needed} bytes, have {available}")]
    TruncatedFile { needed: u64, available: u64 },
    #[error("trailing data: expected {expected} bytes, file has {actual}")]
    TrailingData { expected: u64, actual: u64 },
    #[error("dimensions {width}x{height} exceed 2^31 pixels")]
    DimensionOverflow { width: u32, height: u32 },
    #[error("record {index}: confidence {value} outside [0, 1]")]
    ConfidenceOutOfRange { index: u64, value: f32 },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl IoError {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IoError::File {
            path: path.into(),
            source,
        }
    }

    /// True for a missing input file.
    pub fn is_not_found(&self) -> bool {
        match self {
            IoError::File { source, .. } | IoError::Io(source) => {
                source.kind() == std::io::ErrorKind::NotFound
            }
            _ => false,
        }
    }
}

pub(crate) fn read_file(path: &std::path::Path) -> Result<Vec<u8>, IoError> {
    std::fs::read(path).map_err(|e| IoError::file(path, e))
}

pub(crate) fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<(), IoError> {
    std::fs::write(path, bytes).map_err(|e| IoError::file(path, e))
}
