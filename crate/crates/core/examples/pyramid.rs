//! Builds the five-level farthest-point pyramid of a scene and runs one
//! untrained forward pass, printing the shapes at every level.
//!
//! cargo run --release --example pyramid

use wsaflow::backbone::build_pyramid;
use wsaflow::datagen::{generate_scene, SceneConfig};
use wsaflow::flownet::{FlowNet, ModelConfig};
use wsaflow::tensor::Graph;

fn main() -> wsaflow::Result<()> {
    let sample = generate_scene(&SceneConfig::default())?;
    let cfg = ModelConfig::default();
    let pyramid = build_pyramid(&sample.source, &cfg.ratios, cfg.min_level_points)?;
    println!("level sizes {:?}", pyramid.sizes());

    let net = FlowNet::<f32>::new(cfg, 0)?;
    println!("{} parameters", net.params().numel());
    let mut g = Graph::new();
    let (_, pass) = net.forward(&mut g, &sample.source, &sample.target)?;
    for s in pass.levels.iter().rev() {
        println!(
            "level {}: flow {:?}, estimator features {:?}, cost {:?}",
            s.level,
            g.shape(s.flow),
            g.shape(s.est_feats),
            g.shape(s.cost)
        );
    }
    Ok(())
}
