//! Overfits the desk preset on eight synthetic scenes and prints the
//! per-epoch log.
//!
//! cargo run --release --example overfit -- [epochs]

use std::time::Instant;

use wsaflow::datagen::{generate_scene, SceneConfig};
use wsaflow::flownet::{LossWeights, ModelConfig};
use wsaflow::trainer::{train_epoch, zero_flow_baseline, EpochLog, TrainConfig, TrainState};

fn main() -> wsaflow::Result<()> {
    let epochs = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(200);
    let data = (0..8)
        .map(|i| generate_scene(&SceneConfig { seed: i, ..SceneConfig::default() }))
        .collect::<wsaflow::Result<Vec<_>>>()?;
    println!("zero-flow EPE3D {:.4}", zero_flow_baseline(&data)?.mean.epe3d);

    let cfg = TrainConfig { epochs, ..TrainConfig::default() };
    let weights = LossWeights::default();
    let mut state = TrainState::new(ModelConfig::default(), cfg.seed)?;
    let start = Instant::now();
    println!("{}\tresidual", EpochLog::HEADER);
    while state.epoch < cfg.epochs {
        let log = train_epoch(&mut state, &data, &cfg, &weights)?;
        if log.epoch == 1 || log.epoch % 10 == 0 {
            println!("{log}\t{:.4}", log.coord_residual.unwrap_or(f64::NAN));
        }
    }
    println!("{:.1} s", start.elapsed().as_secs_f64());
    Ok(())
}
