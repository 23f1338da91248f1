//! Annotations, grid labels, augmentation, synthetic scenes and datasets.

mod annotation;
mod augment;
mod dataset;
mod grid;
mod resize;
mod stats;
mod synthetic;

pub use annotation::{
    parse_annotation, parse_annotation_with_bounds, serialize_annotation, AnnotationError,
    LineAnnotation, LineClass, Point,
};
pub use augment::{mirror_annotations, mirror_augment, occlude_augment, OcclusionConfig, Rect};
pub use dataset::{
    derive_seed, generate_dataset, list_samples, load_dataset, load_labels, load_sample,
    read_labels, read_manifest, sample_name, write_sample, Manifest, ManifestEntry, Sample,
    IMAGES_DIR, LABELS_DIR, MANIFEST_FILE,
};
pub use grid::{
    clip_to_cells, decode_grid, encode_labels, CellClass, CellSegment, DetectedSegment,
    GridConfig, LabelGrid, MIN_CLIP_LEN,
};
pub use resize::{letterbox, Letterbox, DEFAULT_PAD_GRAY};
pub use stats::{
    dataset_line_aspect_stats, line_aspect_ratio, AspectHistogram, DEFAULT_BIN_COUNT,
    DEFAULT_BIN_WIDTH,
};
pub use synthetic::{generate_synthetic_scene, Span, SyntheticScene, SyntheticSceneParams};

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Annotation {
        path: PathBuf,
        #[source]
        source: AnnotationError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("missing label file {0}")]
    MissingLabel(PathBuf),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("infeasible scene: {0}")]
    Infeasible(String),
    #[error("empty dataset: {0}")]
    Empty(String),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}
