//! The coarse-to-fine scene flow network, its losses and metrics.

mod checkpoint;
mod config;
mod estimator;
mod loss;
mod metrics;
mod model;

pub use checkpoint::{Checkpoint, OptimizerState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{LossWeights, ModelConfig};
pub use estimator::{estimator_specs, estimator_step, layer_inputs, EstimatorInputs};
pub use loss::{
    compute_losses, level_ground_truth, loss_coordinate, loss_deformation, loss_scene_flow,
    loss_total, LossTerms,
};
pub use metrics::{metrics, point_errors, strict_accurate, FlowMetrics};
pub use model::{forward_with, model_specs, FlowNet, ForwardPass, LevelState};
