//! Procedural multi-view dataset: primitive scenes, an exact ray tracer used
//! as ground truth, geometry oracles and the on-disk format.

pub mod dataset;
pub mod image;
pub mod scene;

pub use dataset::{
    build_dataset, generate_record, image_name, load_dataset, random_cameras, Dataset, DatasetConfig,
    DatasetRecord, DatasetView, SceneEntry, ViewEntry, DEFAULT_FOV_DEG,
};
pub use image::{hstack, ImageRgb};
pub use scene::{
    caption_for, caption_vocabulary, parse_caption, random_scene, raytrace, raytrace_rays,
    scene_density_oracle, surface_samples, Primitive, PrimitiveKind, SceneDensityField, SceneSpec,
    BACKGROUND, PALETTE,
};
