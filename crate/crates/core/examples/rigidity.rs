//! Randomized check that one set of aggregation weights applied to
//! coordinates and to rigidly moved coordinates reproduces the motion
//! exactly, plus the residual left by a shifted centre.
//!
//! cargo run --release --example rigidity -- [trials]

use wsaflow::checks::rigidity_suite;

fn main() -> wsaflow::Result<()> {
    let trials = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(10_000);
    let exact = rigidity_suite(trials, 0, None)?;
    println!(
        "{trials} trials: max residual {:.3e} in {:.3} s",
        exact.max_residual,
        exact.elapsed.as_secs_f64()
    );

    let e = [0.05, -0.1, 0.2];
    let shifted = rigidity_suite(trials, 0, Some(e))?;
    println!(
        "centre shifted by {e:?}: max residual {:.4}, worst gap to ‖(R - I) e‖ {:.3e}",
        shifted.max_residual,
        shifted.max_perturbation_error.unwrap_or(f64::NAN)
    );
    Ok(())
}
