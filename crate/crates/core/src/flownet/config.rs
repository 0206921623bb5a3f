use serde::{Deserialize, Serialize};

use crate::backbone::level_sizes;
use crate::cost_volume::{CostVolumeConfig, OffsetEncoding};
use crate::deform::{DeformConfig, StructureNorm};
use crate::error::{Error, Result};
use crate::tensor::Activation;

/// Architecture hyperparameters. Neighbourhood sizes are upper bounds: each
/// level uses `min(K, points available)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Points per source cloud; fixes the per-level sizes.
    pub num_points: usize,
    pub ratios: Vec<f64>,
    /// Set-conv output width per level.
    pub channels: Vec<usize>,
    pub k_conv: usize,
    pub k_cost: usize,
    pub k_dilated: usize,
    pub dilation: usize,
    pub cost_channels: usize,
    pub cost_offsets: OffsetEncoding,
    pub k_up: usize,
    pub wsa_hidden: usize,
    pub k_dd: usize,
    pub dd_norm: StructureNorm,
    pub dd_recompute_knn: bool,
    /// Widths of the estimator's dense block; the last one is `C_e`.
    pub estimator_channels: Vec<usize>,
    pub dense_skips: bool,
    /// Shared aggregation weights for coordinates, features and flow. When
    /// off, features and flow get independent weight networks.
    pub use_wsa: bool,
    /// Feed the deformation degree to the estimator and enable its loss.
    pub use_dd: bool,
    /// Add the upsampled flow to the estimator's output.
    pub residual_flow: bool,
    /// Start every flow head at zero so the untrained network predicts no
    /// motion.
    pub zero_init_flow_head: bool,
    pub leaky_slope: f64,
    pub min_level_points: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_points: 512,
            ratios: vec![1.0, 1.0 / 4.0, 1.0 / 16.0, 1.0 / 32.0, 1.0 / 128.0],
            channels: vec![32, 64, 96, 128, 160],
            k_conv: 16,
            k_cost: 16,
            k_dilated: 8,
            dilation: 2,
            cost_channels: 64,
            cost_offsets: OffsetEncoding::Vector,
            k_up: 8,
            wsa_hidden: 16,
            k_dd: 8,
            dd_norm: StructureNorm::PerChannel,
            dd_recompute_knn: false,
            estimator_channels: vec![128, 96, 64],
            dense_skips: true,
            use_wsa: true,
            use_dd: true,
            residual_flow: false,
            zero_init_flow_head: true,
            leaky_slope: 0.1,
            min_level_points: 4,
        }
    }
}

impl ModelConfig {
    /// Two-level network on 32 points with `K = 4` everywhere, small enough
    /// for exhaustive gradient checks.
    pub fn tiny() -> Self {
        Self {
            num_points: 32,
            ratios: vec![1.0, 0.25],
            channels: vec![6, 8],
            k_conv: 4,
            k_cost: 4,
            k_dilated: 2,
            dilation: 2,
            cost_channels: 5,
            k_up: 4,
            wsa_hidden: 4,
            k_dd: 4,
            estimator_channels: vec![6, 5, 4],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = self.level_sizes()?;
        if self.channels.len() != sizes.len() {
            return Err(Error::Config(format!(
                "{} channel widths for {} levels",
                self.channels.len(),
                sizes.len()
            )));
        }
        if sizes.last().copied().unwrap_or(0) < self.min_level_points.max(1) {
            return Err(Error::Config(format!(
                "coarsest level holds {} points, need {}",
                sizes.last().copied().unwrap_or(0),
                self.min_level_points
            )));
        }
        let ks = [
            ("k_conv", self.k_conv),
            ("k_cost", self.k_cost),
            ("k_dilated", self.k_dilated),
            ("dilation", self.dilation),
            ("k_up", self.k_up),
            ("k_dd", self.k_dd),
            ("cost_channels", self.cost_channels),
            ("wsa_hidden", self.wsa_hidden),
        ];
        if let Some((name, _)) = ks.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.estimator_channels.is_empty() || self.estimator_channels.contains(&0) {
            return Err(Error::Config("estimator needs positive layer widths".into()));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config("leaky_slope must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn level_sizes(&self) -> Result<Vec<usize>> {
        level_sizes(self.num_points, &self.ratios)
    }

    pub fn depth(&self) -> usize {
        self.ratios.len()
    }

    pub fn activation(&self) -> Activation {
        if self.leaky_slope == 0.0 {
            Activation::Relu
        } else {
            Activation::LeakyRelu(self.leaky_slope)
        }
    }

    pub fn est_width(&self) -> usize {
        *self.estimator_channels.last().expect("validated")
    }

    pub fn cost_config(&self) -> CostVolumeConfig {
        CostVolumeConfig {
            k_target: self.k_cost,
            k_dilated: self.k_dilated,
            dilation: self.dilation,
            channels: self.cost_channels,
            offsets: self.cost_offsets,
            act: self.activation(),
        }
    }

    /// Deformation settings at a level of `n` points.
    pub fn deform_config(&self, n: usize) -> DeformConfig {
        DeformConfig {
            k: self.k_dd.min(n),
            recompute_knn: self.dd_recompute_knn,
            norm: self.dd_norm,
        }
    }

    /// Width of the flattened deformation degree at a level of `n` points.
    pub fn dd_width(&self, n: usize) -> usize {
        if self.use_dd {
            self.k_dd.min(n) * self.dd_norm.channels()
        } else {
            0
        }
    }
}

/// Per-level `γ` and per-term `α` loss weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub gamma: Vec<f64>,
    pub alpha_s: f64,
    pub alpha_p: f64,
    pub alpha_dd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma: vec![0.02, 0.04, 0.08, 0.16, 0.16],
            alpha_s: 1.0,
            alpha_p: 0.3,
            alpha_dd: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self, levels: usize) -> Result<()> {
        if self.gamma.len() != levels {
            return Err(Error::Argument(format!(
                "{} level weights for {levels} levels",
                self.gamma.len()
            )));
        }
        let all = self
            .gamma
            .iter()
            .chain([&self.alpha_s, &self.alpha_p, &self.alpha_dd]);
        if all.clone().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Argument("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_defaults_validate() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.level_sizes().unwrap(), vec![512, 128, 32, 16, 4]);
        ModelConfig::tiny().validate().unwrap();
        LossWeights::default().validate(5).unwrap();
    }

    #[test]
    fn channel_count_must_match_levels() {
        let c = ModelConfig {
            channels: vec![8, 8],
            ..ModelConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn negative_loss_weight_rejected() {
        let w = LossWeights {
            alpha_p: -0.1,
            ..LossWeights::default()
        };
        assert!(matches!(w.validate(5), Err(Error::Argument(_))));
        assert!(LossWeights::default().validate(2).is_err());
    }
}
