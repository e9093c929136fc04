//! Procedural scene dataset: generation, prompt sampling, splits, and
//! persistence.

pub mod manifest;
pub mod prompt;
pub mod scene;

pub use manifest::{
    build_dataset, dir_digest, read_record, write_record, ImageMaskRecord, Manifest,
    ManifestEntry, SplitCounts,
};
pub use prompt::{box_prompt, point_prompt, Prompt};
pub use scene::{generate_scene, Scene, SceneConfig};
