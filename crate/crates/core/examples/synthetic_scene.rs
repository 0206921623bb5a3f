//! Generates one synthetic scene, saves it as a WSAF sample, reads it back
//! and prints a few statistics.
//!
//! cargo run --release --example synthetic_scene -- [seed]

use wsaflow::datagen::{generate_scene, read_sample, write_sample, SceneConfig};
use wsaflow::trainer::zero_flow_baseline;

fn main() -> wsaflow::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(0);
    let cfg = SceneConfig { seed, ..SceneConfig::default() };
    let sample = generate_scene(&cfg)?;

    let mut counts = std::collections::BTreeMap::new();
    for &l in &sample.labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    println!("{} points, points per label {counts:?}", sample.source.len());
    let longest = sample
        .flow
        .vectors()
        .iter()
        .map(|v| v.iter().map(|c| c * c).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    println!("longest flow vector {longest:.4} m");
    println!("zero-flow EPE3D {:.4}", zero_flow_baseline(std::slice::from_ref(&sample))?.mean.epe3d);

    let dir = tempfile::tempdir().map_err(|e| wsaflow::Error::Argument(e.to_string()))?;
    let path = dir.path().join("scene.wsaf");
    write_sample(&sample, &path)?;
    let back = read_sample(&path)?;
    println!(
        "{} bytes on disk, round trip exact: {}",
        std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0),
        back == sample.quantized()
    );
    Ok(())
}
