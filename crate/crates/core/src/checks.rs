//! Self-checks shared by the command line and the test suites: the rigidity
//! identity sweep and finite-difference gradient checks for every
//! differentiable operation and for a complete tiny network.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{set_conv, set_conv_specs};
use crate::cost_volume::{cost_volume, cost_volume_specs, CostVolumeConfig, OffsetEncoding};
use crate::deform::{deformation_from_flow, DeformConfig, StructureNorm};
use crate::error::Result;
use crate::flownet::{compute_losses, forward_with, model_specs, LossWeights, ModelConfig};
use crate::geometry::{apply_rigid, knn, random_rotation_with, FlowField, PointCloud};
use crate::nn::{Bound, ParamSpec, ParamStore};
use crate::tensor::{grad_check, Activation, GradCheckReport, Graph, IndexTable, Reduction, Tensor, Var};
use crate::wsa::{compute_weights, weight_specs, wsa_upsample, RigidityTrial};

/// Tolerance on the rigidity residual.
pub const RIGIDITY_TOLERANCE: f64 = 1e-10;
/// Tolerance on `|residual - ‖(R - I) e‖|` for perturbed trials.
pub const PERTURBATION_TOLERANCE: f64 = 1e-9;
/// Per-operation relative error bound.
pub const OP_TOLERANCE: f64 = 1e-4;
/// End-to-end relative error bound.
pub const NETWORK_TOLERANCE: f64 = 1e-3;
/// Central-difference step.
pub const FD_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct RigidityReport {
    pub trials: usize,
    pub max_residual: f64,
    /// Largest `|residual - ‖(R - I) e‖|` when a violation was injected.
    pub max_perturbation_error: Option<f64>,
    pub elapsed: Duration,
}

impl RigidityReport {
    pub fn passed(&self) -> bool {
        match self.max_perturbation_error {
            None => self.max_residual < RIGIDITY_TOLERANCE,
            Some(err) => err <= PERTURBATION_TOLERANCE,
        }
    }
}

/// Runs `trials` randomized identity checks with 3 to 16 neighbours each.
/// With `violation = Some(e)` every trial shifts the claimed centre by `e`.
pub fn rigidity_suite(trials: usize, seed: u64, violation: Option<[f64; 3]>) -> Result<RigidityReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_residual: f64 = 0.0;
    let mut max_err: Option<f64> = None;
    for _ in 0..trials {
        let k = rng.random_range(3..=16);
        let trial = RigidityTrial::sample(&mut rng, k);
        match violation {
            None => max_residual = max_residual.max(trial.residual()?),
            Some(e) => {
                let (r, expected) = trial.perturbed_residual(e)?;
                max_residual = max_residual.max(r);
                max_err = Some(max_err.unwrap_or(0.0).max((r - expected).abs()));
            }
        }
    }
    Ok(RigidityReport {
        trials,
        max_residual,
        max_perturbation_error: max_err,
        elapsed: start.elapsed(),
    })
}

/// Worst case of one operation over all trials.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_relative_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub trials: usize,
    /// `(input, element, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_relative_error < OP_TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
        .expect("finite")
}

/// Scale of the projection weights. Keeping the objective small keeps the
/// round-off of central differences on exactly-zero gradients (biases in
/// front of a softmax, for instance) well under the `1e-8` denominator floor.
const PROJECTION_SCALE: f64 = 1e-3;

/// `Σ out ⊙ R` for a fixed pseudo-random `R`, so every output element
/// carries a distinct weight.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_f00d);
    let r = uniform(&mut rng, &g.shape(out).to_vec(), -PROJECTION_SCALE, PROJECTION_SCALE);
    let r = g.constant(r);
    let m = g.mul(out, r)?;
    g.sum(m)
}

fn random_table(rng: &mut ChaCha8Rng, rows: usize, cols: usize, max: usize) -> IndexTable {
    IndexTable::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(0..max)).collect())
        .expect("valid table")
}

fn cloud_tensor(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    uniform(rng, &[n, 3], -1.0, 1.0)
}

/// Binds data inputs `[0, data)` positionally and the rest by name.
fn bind_tail(names: &[String], vars: &[Var], data: usize) -> Bound {
    Bound::from_vars(
        names
            .iter()
            .cloned()
            .zip(vars[data..].iter().copied())
            .collect::<BTreeMap<_, _>>(),
    )
}

fn with_params(mut data: Vec<Tensor<f64>>, specs: &[ParamSpec], seed: u64) -> Result<(Vec<Tensor<f64>>, Vec<String>)> {
    let store = ParamStore::<f64>::init(specs, seed)?;
    let mut names = Vec::new();
    for (k, t) in store.iter() {
        // nonzero biases keep activations away from exact zeros
        let mut t = t.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ names.len() as u64);
        if k.ends_with(".b") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
        names.push(k.clone());
        data.push(t);
    }
    Ok((data, names))
}

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// Builds the inputs and scalar function of one named check.
fn op_case(name: &'static str, seed: u64) -> Result<(OpFn, Vec<Tensor<f64>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let case: (OpFn, Vec<Tensor<f64>>) = match name {
        "linear" => (
            Box::new(move |g, v| {
                let y = g.linear(v[0], v[1], v[2])?;
                project(g, y, seed)
            }),
            vec![
                uniform(&mut rng, &[5, 4], -1., 1.),
                uniform(&mut rng, &[4, 3], -1., 1.),
                uniform(&mut rng, &[3], -1., 1.),
            ],
        ),
        "relu" => (
            Box::new(move |g, v| {
                let y = g.relu(v[0])?;
                project(g, y, seed)
            }),
            vec![uniform(&mut rng, &[6, 4], -1., 1.)],
        ),
        "leaky_relu" => (
            Box::new(move |g, v| {
                let y = g.activation(v[0], Activation::LeakyRelu(0.1))?;
                project(g, y, seed)
            }),
            vec![uniform(&mut rng, &[6, 4], -1., 1.)],
        ),
        "softmax" => (
            Box::new(move |g, v| {
                let y = g.softmax(v[0])?;
                project(g, y, seed)
            }),
            vec![uniform(&mut rng, &[5, 6], -2., 2.)],
        ),
        "gather" => {
            let table = random_table(&mut rng, 5, 4, 7);
            (
                Box::new(move |g, v| {
                    let y = g.gather(v[0], &table)?;
                    project(g, y, seed)
                }),
                vec![uniform(&mut rng, &[7, 3], -1., 1.)],
            )
        }
        "reduce_max" | "reduce_mean" => {
            let kind = if name == "reduce_max" { Reduction::Max } else { Reduction::Mean };
            (
                Box::new(move |g, v| {
                    let y = g.reduce(v[0], kind)?;
                    project(g, y, seed)
                }),
                vec![uniform(&mut rng, &[5, 4, 3], -1., 1.)],
            )
        }
        "mean_channels" => (
            Box::new(move |g, v| {
                let y = g.mean_channels(v[0])?;
                project(g, y, seed)
            }),
            vec![uniform(&mut rng, &[5, 4, 3], -1., 1.)],
        ),
        "concat" => (
            Box::new(move |g, v| {
                let y = g.concat(&[v[0], v[1]])?;
                project(g, y, seed)
            }),
            vec![uniform(&mut rng, &[5, 2], -1., 1.), uniform(&mut rng, &[5, 3], -1., 1.)],
        ),
        "add" | "sub" | "mul" => (
            Box::new(move |g, v| {
                let y = match name {
                    "add" => g.add(v[0], v[1])?,
                    "sub" => g.sub(v[0], v[1])?,
                    _ => g.mul(v[0], v[1])?,
                };
                project(g, y, seed)
            }),
            vec![uniform(&mut rng, &[4, 3], -1., 1.), uniform(&mut rng, &[4, 3], -1., 1.)],
        ),
        "scale" => (
            Box::new(move |g, v| {
                let y = g.scale(v[0], -1.7)?;
                project(g, y, seed)
            }),
            vec![uniform(&mut rng, &[4, 3], -1., 1.)],
        ),
        "abs" => (
            Box::new(move |g, v| {
                let y = g.abs(v[0])?;
                project(g, y, seed)
            }),
            vec![uniform(&mut rng, &[6, 3], -1., 1.)],
        ),
        "weighted_sum" => (
            Box::new(move |g, v| {
                let y = g.weighted_sum(v[0], v[1])?;
                project(g, y, seed)
            }),
            vec![uniform(&mut rng, &[5, 4], -1., 1.), uniform(&mut rng, &[5, 4, 3], -1., 1.)],
        ),
        "row_norm" => (
            Box::new(move |g, v| {
                let y = g.row_norm(v[0])?;
                project(g, y, seed)
            }),
            vec![uniform(&mut rng, &[5, 3], -1., 1.)],
        ),
        "sum" => (Box::new(|g, v| g.sum(v[0])), vec![uniform(&mut rng, &[3, 4], -1., 1.)]),
        "reshape" => (
            Box::new(move |g, v| {
                let y = g.reshape(v[0], vec![4, 3])?;
                project(g, y, seed)
            }),
            vec![uniform(&mut rng, &[2, 6], -1., 1.)],
        ),
        "set_conv" => {
            let parent = cloud_tensor(&mut rng, 10);
            let child_idx = [0usize, 3, 6, 9];
            let pc = PointCloud::from_tensor(&parent)?;
            let child = pc.select(&child_idx)?;
            let table = knn(&child, &pc, 4)?.indices().clone();
            let feats = uniform(&mut rng, &[10, 2], -1., 1.);
            let (inputs, names) = with_params(
                vec![parent, feats, child.to_tensor::<f64>()],
                &set_conv_specs("sc", 2, 5),
                seed,
            )?;
            (
                Box::new(move |g, v| {
                    let p = bind_tail(&names, v, 3);
                    let y = set_conv(g, &p, "sc", v[0], v[1], v[2], &table, Activation::LeakyRelu(0.1))?;
                    project(g, y, seed)
                }),
                inputs,
            )
        }
        "cost_volume" => {
            let cfg = CostVolumeConfig {
                k_target: 4,
                k_dilated: 2,
                dilation: 2,
                channels: 3,
                offsets: OffsetEncoding::Vector,
                act: Activation::LeakyRelu(0.1),
            };
            let (inputs, names) = with_params(
                vec![
                    cloud_tensor(&mut rng, 8),
                    uniform(&mut rng, &[8, 2], -1., 1.),
                    cloud_tensor(&mut rng, 9),
                    uniform(&mut rng, &[9, 2], -1., 1.),
                ],
                &cost_volume_specs("cv", 2, &cfg),
                seed,
            )?;
            (
                Box::new(move |g, v| {
                    let p = bind_tail(&names, v, 4);
                    let y = cost_volume(g, &p, "cv", &cfg, v[0], v[1], v[2], v[3])?.values;
                    project(g, y, seed)
                }),
                inputs,
            )
        }
        "wsa_upsample" => {
            let fine = cloud_tensor(&mut rng, 8);
            let coarse = cloud_tensor(&mut rng, 5);
            let table = knn(&PointCloud::from_tensor(&fine)?, &PointCloud::from_tensor(&coarse)?, 3)?;
            let (inputs, names) = with_params(
                vec![
                    fine,
                    coarse,
                    uniform(&mut rng, &[5, 4], -1., 1.),
                    uniform(&mut rng, &[5, 3], -1., 1.),
                ],
                &weight_specs("w", 4, 3),
                seed,
            )?;
            (
                Box::new(move |g, v| {
                    let p = bind_tail(&names, v, 4);
                    let w = compute_weights(g, &p, "w", v[0], v[1], v[2], &table, Activation::LeakyRelu(0.1))?;
                    let up = wsa_upsample(g, &w, v[1], v[2], v[3])?;
                    let all = g.concat(&[up.coords_up, up.feats_up, up.flow_up])?;
                    project(g, all, seed)
                }),
                inputs,
            )
        }
        "deformation_degree" => {
            let points = cloud_tensor(&mut rng, 9);
            let cloud = PointCloud::from_tensor(&points)?;
            let cfg = DeformConfig {
                k: 4,
                recompute_knn: false,
                norm: StructureNorm::PerChannel,
            };
            (
                Box::new(move |g, v| {
                    let d = deformation_from_flow(g, &cloud, v[0], v[1], &cfg)?;
                    project(g, d, seed)
                }),
                vec![points, uniform(&mut rng, &[9, 3], -0.5, 0.5)],
            )
        }
        other => unreachable!("unregistered check {other}"),
    };
    Ok(case)
}

/// Every registered operation, primitive and composite.
pub const OPS: &[&str] = &[
    "linear",
    "relu",
    "leaky_relu",
    "softmax",
    "gather",
    "reduce_max",
    "reduce_mean",
    "mean_channels",
    "concat",
    "add",
    "sub",
    "mul",
    "scale",
    "abs",
    "weighted_sum",
    "row_norm",
    "sum",
    "reshape",
    "set_conv",
    "cost_volume",
    "wsa_upsample",
    "deformation_degree",
];

/// Checks every operation in [`OPS`] over `trials` seeds.
pub fn op_gradient_suite(trials: usize, seed: u64) -> Result<Vec<OpCheck>> {
    OPS.iter()
        .map(|&name| {
            let mut worst = OpCheck {
                name,
                max_relative_error: 0.0,
                checked: 0,
                skipped_kinks: 0,
                trials,
                worst: None,
            };
            for t in 0..trials as u64 {
                let (f, inputs) = op_case(name, seed.wrapping_mul(1_000_003).wrapping_add(t))?;
                let r = grad_check(f, &inputs, FD_EPS)?;
                if worst.worst.is_none() || r.max_relative_error > worst.max_relative_error {
                    worst.max_relative_error = r.max_relative_error;
                    worst.worst = r.worst;
                }
                worst.checked += r.checked;
                worst.skipped_kinks += r.skipped_kinks;
            }
            Ok(worst)
        })
        .collect()
}

/// Gradient of the total loss of `cfg` with respect to every parameter,
/// against central differences, on one random rigid scene.
pub fn network_gradient_check(cfg: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = PointCloud::new(
        (0..cfg.num_points)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect(),
    )?;
    let motion = random_rotation_with(&mut rng).with_translation([0.1, -0.05, 0.08]);
    let target = apply_rigid(&source, &motion);
    let gt = FlowField::new(source.points().iter().map(|p| motion.flow_at(p)).collect())?;
    let weights = LossWeights {
        gamma: (0..cfg.depth()).map(|l| 0.02 * (1 << l) as f64).collect(),
        ..LossWeights::default()
    };
    let specs = model_specs(cfg)?;
    let (inputs, names) = with_params(Vec::new(), &specs, seed)?;
    let cfg = cfg.clone();
    let f = move |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
        let p = bind_tail(&names, v, 0);
        let pass = forward_with(g, &p, &cfg, &source, &target)?;
        Ok(compute_losses(g, &pass, &gt, &weights)?.total)
    };
    grad_check(f, &inputs, FD_EPS)
}
