//! The TOML run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{generate_scene, SamplePair, SceneConfig};
use crate::error::{Error, Result};
use crate::flownet::{LossWeights, ModelConfig};
use crate::trainer::TrainConfig;

/// Dataset sizes and seeds of the generalization and ablation runs. Scene
/// `i` of a split uses seed `seed + i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub train_count: usize,
    pub held_out_count: usize,
    pub train_seed: u64,
    pub held_out_seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            train_count: 64,
            held_out_count: 16,
            train_seed: 1000,
            held_out_seed: 5000,
        }
    }
}

impl AblationConfig {
    pub fn train_set(&self, scene: &SceneConfig) -> Result<Vec<SamplePair>> {
        scenes(scene, self.train_seed, self.train_count)
    }

    pub fn held_out_set(&self, scene: &SceneConfig) -> Result<Vec<SamplePair>> {
        scenes(scene, self.held_out_seed, self.held_out_count)
    }
}

/// `count` scenes with seeds `seed, seed + 1, ..`.
pub fn scenes(scene: &SceneConfig, seed: u64, count: usize) -> Result<Vec<SamplePair>> {
    (0..count as u64)
        .map(|i| {
            generate_scene(&SceneConfig {
                seed: seed.wrapping_add(i),
                ..scene.clone()
            })
        })
        .collect()
}

pub const GENERALIZATION_EPOCHS: usize = 40;
/// Coordinate-loss weight of the generalization runs, picked on a
/// validation split (seeds 7000..7015) disjoint from the held-out set.
pub const GENERALIZATION_ALPHA_P: f64 = 0.03;

/// Every section is optional and falls back to its defaults. Unknown keys
/// are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The budget of the shipped generalization and ablation runs: 64
    /// training scenes, 16 held out, 40 epochs with augmentation and a
    /// lighter coordinate loss.
    pub fn generalization() -> Self {
        let mut cfg = Self::default();
        cfg.train.epochs = GENERALIZATION_EPOCHS;
        cfg.train.augment = true;
        cfg.loss.alpha_p = GENERALIZATION_ALPHA_P;
        cfg
    }

    /// Defaults when `path` is `None`.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.train.validate()?;
        self.model.validate()?;
        self.loss
            .validate(self.model.depth())
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.scene.num_points != self.model.num_points {
            return Err(Error::Config(format!(
                "scene.num_points = {} but model.num_points = {}",
                self.scene.num_points, self.model.num_points
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain data serializes")
    }
}
