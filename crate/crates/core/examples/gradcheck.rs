//! Finite-difference gradient checks of every differentiable operation and
//! of the whole tiny network.
//!
//! cargo run --release --example gradcheck -- [trials]

use wsaflow::commands::gradcheck;
use wsaflow::flownet::ModelConfig;

fn main() -> wsaflow::Result<()> {
    let trials = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(20);
    let outcome = gradcheck(&ModelConfig::tiny(), trials, 0)?;
    print!("{}", outcome.report());
    println!("{}", if outcome.passed() { "all within tolerance" } else { "FAILED" });
    Ok(())
}
