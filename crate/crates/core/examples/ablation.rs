//! Trains the four module variants on the same scenes and budget and
//! compares them on held-out scenes.
//!
//! cargo run --release --example ablation -- [epochs] [train scenes]

use wsaflow::commands::{ablate, metric_row};
use wsaflow::config::RunConfig;

fn main() -> wsaflow::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().ok());
    let mut cfg = RunConfig::default();
    cfg.train.epochs = args.next().flatten().unwrap_or(10);
    cfg.ablation.train_count = args.next().flatten().unwrap_or(16);
    cfg.train.augment = true;
    let outcome = ablate(&cfg, None)?;
    println!("zero flow {}", metric_row(&outcome.baseline));
    print!("{}", outcome.table());
    Ok(())
}
