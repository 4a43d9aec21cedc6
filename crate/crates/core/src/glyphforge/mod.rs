//! Deterministic synthesis of typography-controlled scene-text samples with
//! exact per-word masks.

pub mod compose;
pub mod dataset;
pub mod font;
pub mod raster;
pub mod validate;

pub use compose::{
    compose_sample, Arrangement, BBox, BackgroundKind, BackgroundSpec, LayoutPolicy, StyledSample,
};
pub use dataset::{
    attribute_shares, build_dataset, default_vocabulary, mask_file_name, DatasetConfig,
    DatasetManifest, ManifestRecord, SamplePlan, Split, CONFIG_FILE, MANIFEST_FILE,
};
pub use raster::{AttributeKind, AttributeSet, FontClass, GlyphLayer, RasterConfig, Rasterizer};
pub use validate::{validate_masks, ValidationReport};
