//! Dataset ingestion: COCO annotations, mask codec, folds and episode sampling.

mod coco;
mod folds;
mod manifest;
mod rle;
mod sampler;

use std::path::Path;

use thiserror::Error;

pub use coco::{parse_manifest, rasterize_polygons};
pub use folds::{build_folds, build_folds_from_ids, DatasetKind, FoldSpec, FOLD_COUNT};
pub use manifest::{
    AnnotationId, CategoryDef, CategoryId, DatasetManifest, ImageId, ImageRecord,
    IngestWarnings, InstanceAnnotation,
};
pub use rle::{decode_compressed_counts, decode_rle, encode_rle, BitGrid, BoxPx, CodecError, MaskRle};
pub use sampler::{sample_episodes, validate_episode, Episode, SamplingConstraint, SupportRef};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed annotation document at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("annotation {annotation}: {source}")]
    Codec {
        annotation: AnnotationId,
        #[source]
        source: CodecError,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, IngestError> {
    let raw = std::fs::read(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_manifest(&raw)
}
