//! Trains briefly, predicts the flow of a held-out scene and writes a
//! coloured PLY: source in blue, warped points green where accurate and red
//! elsewhere.
//!
//! cargo run --release --example export_visualization -- [out.ply] [epochs]

use std::path::PathBuf;

use wsaflow::datagen::{correctness_view, export_ply, generate_scene, SceneConfig, GREEN};
use wsaflow::flownet::{metrics, LossWeights, ModelConfig};
use wsaflow::trainer::{train, TrainConfig, TrainOutput, TrainState};

fn main() -> wsaflow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "flow.ply".into()));
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(20);

    let data = (0..8)
        .map(|i| generate_scene(&SceneConfig { seed: i, ..SceneConfig::default() }))
        .collect::<wsaflow::Result<Vec<_>>>()?;
    let cfg = TrainConfig { epochs, ..TrainConfig::default() };
    let mut state = TrainState::new(ModelConfig::default(), 0)?;
    train(&mut state, &data, &cfg, &LossWeights::default(), &TrainOutput::default())?;

    let scene = generate_scene(&SceneConfig { seed: 99, ..SceneConfig::default() })?;
    let pred = state.net.predict(&scene.source, &scene.target)?;
    let (points, colors) = correctness_view(&scene.source, &pred, &scene.flow)?;
    export_ply(&points, &colors, &out)?;
    let green = colors.iter().filter(|&&c| c == GREEN).count();
    println!(
        "wrote {} ({green} of {} warped points accurate, EPE3D {:.4})",
        out.display(),
        scene.source.len(),
        metrics(&pred, &scene.flow)?.epe3d
    );
    Ok(())
}
