//! Shows that stopping, checkpointing and resuming gives the same model as
//! one uninterrupted run.
//!
//! cargo run --release --example checkpoint_resume

use wsaflow::datagen::{generate_scene, SceneConfig};
use wsaflow::flownet::{Checkpoint, LossWeights, ModelConfig};
use wsaflow::trainer::{train, TrainConfig, TrainOutput, TrainState};

fn main() -> wsaflow::Result<()> {
    let scene = SceneConfig { num_points: 32, num_objects: 2, ..SceneConfig::default() };
    let data = (0..4)
        .map(|i| generate_scene(&SceneConfig { seed: i, ..scene.clone() }))
        .collect::<wsaflow::Result<Vec<_>>>()?;
    let model = ModelConfig::tiny();
    let weights = LossWeights { gamma: vec![0.02, 0.04], ..LossWeights::default() };
    let full = TrainConfig { epochs: 6, ..TrainConfig::default() };
    let half = TrainConfig { epochs: 3, ..full.clone() };

    let mut straight = TrainState::new(model.clone(), 0)?;
    train(&mut straight, &data, &full, &weights, &TrainOutput::default())?;

    let mut first = TrainState::new(model, 0)?;
    train(&mut first, &data, &half, &weights, &TrainOutput::default())?;
    let bytes = first.to_checkpoint(String::new()).to_bytes()?;
    println!("checkpoint after 3 epochs: {} bytes", bytes.len());
    let mut resumed = TrainState::from_checkpoint(Checkpoint::from_bytes(&bytes)?)?;
    train(&mut resumed, &data, &full, &weights, &TrainOutput::default())?;

    let same = straight.net.params() == resumed.net.params();
    println!("resumed parameters identical to the uninterrupted run: {same}");
    Ok(())
}
