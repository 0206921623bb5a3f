pub mod backbone;
pub mod checks;
pub mod commands;
pub mod config;
mod binio;
pub mod cost_volume;
pub mod datagen;
pub mod deform;
pub mod error;
pub mod flownet;
pub mod geometry;
pub mod nn;
pub mod tensor;
pub mod trainer;
pub mod wsa;

pub use binio::{read_file, write_atomic};
pub use error::{Error, Result};
