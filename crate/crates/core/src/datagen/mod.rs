//! Synthetic rigid multi-object scenes, their file format and coloured
//! point-cloud export.

mod ply;
mod scene;
mod wsaf;

pub use ply::{correctness_view, export_ply, parse_ply, ply_string, read_ply, Rgb, BLUE, GREEN, RED};
pub use scene::{generate_scene, SamplePair, SceneConfig, MIN_OBJECT_POINTS};
pub use wsaf::{read_sample, sample_from_bytes, sample_to_bytes, write_sample, WSAF_MAGIC, WSAF_VERSION};
