//! Weight-sharing aggregation (WSA) upsampling.
//!
//! Every fine point gets one convex weight row over its `K` nearest coarse
//! points. The same row aggregates the coarse coordinates, the coarse
//! estimator features and the coarse flow. When the aggregated coordinate
//! reproduces the fine point (`Σ α_k p_k = p_i`, `Σ α_k = 1`) and the
//! neighbourhood moves rigidly, the aggregated flow is exactly the fine
//! point's rigid flow:
//!
//! ```text
//! Σ α_k s_k = Σ α_k ((R - I) p_k + t) = (R - I) Σ α_k p_k + t Σ α_k = (R - I) p_i + t = s_i
//! ```
//!
//! [`verify_rigidity_identity`] evaluates that residual numerically.

use nalgebra::Vector3;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{random_rotation_with, NeighborTable, Point, RigidMotion};
use crate::nn::{mlp, mlp_specs, Bound, ParamSpec};
use crate::tensor::{Activation, Graph, IndexTable, Real, Var};

/// Weight network: two layers on `[p_k - p_i, f_e(p_k)]`, channel-mean to one
/// logit per neighbour.
pub fn weight_specs(prefix: &str, est_channels: usize, hidden: usize) -> Vec<ParamSpec> {
    mlp_specs(prefix, &[3 + est_channels, hidden, hidden])
}

/// One convex weight row per fine point over its coarse neighbours.
#[derive(Clone, Debug)]
pub struct AggregationWeights {
    alpha: Var,
    table: IndexTable,
}

impl AggregationWeights {
    /// `[N_fine, K]` softmax weights.
    pub fn alpha(&self) -> Var {
        self.alpha
    }

    pub fn table(&self) -> &IndexTable {
        &self.table
    }

    /// Wraps externally produced weights (e.g. fixed test weights).
    pub fn from_parts<T: Real>(g: &Graph<T>, alpha: Var, table: IndexTable) -> Result<Self> {
        if g.shape(alpha) != [table.rows(), table.cols()] {
            return Err(Error::Argument(format!(
                "weights {:?} do not match a {}x{} neighbour table",
                g.shape(alpha),
                table.rows(),
                table.cols()
            )));
        }
        Ok(Self { alpha, table })
    }
}

/// `alpha = softmax(mean(MLP([p_k - p_i, f_e(p_k)])))` per fine point.
#[allow(clippy::too_many_arguments)]
pub fn compute_weights<T: Real>(
    g: &mut Graph<T>,
    params: &Bound,
    prefix: &str,
    fine_points: Var,
    coarse_points: Var,
    coarse_est_feats: Var,
    neighbors: &NeighborTable,
    act: Activation,
) -> Result<AggregationWeights> {
    let n_fine = g.shape(fine_points)[0];
    let table = neighbors.indices();
    if table.rows() != n_fine {
        return Err(Error::Argument(format!(
            "neighbour table has {} rows for {n_fine} fine points",
            table.rows()
        )));
    }
    let expected_in = params_in_width(g, params, prefix)?;
    if expected_in != 3 + g.shape(coarse_est_feats)[1] {
        return Err(Error::Argument(format!(
            "weight network expects {} inputs, got 3 + {}",
            expected_in,
            g.shape(coarse_est_feats)[1]
        )));
    }
    let nb = g.gather(coarse_points, table)?;
    let ctr = g.gather(fine_points, &IndexTable::repeat_self(n_fine, table.cols()))?;
    let off = g.sub(nb, ctr)?;
    let fe = g.gather(coarse_est_feats, table)?;
    let x = g.concat(&[off, fe])?;
    let h = mlp(g, params, prefix, x, 2, act, false)?;
    let logits = g.mean_channels(h)?;
    let alpha = g.softmax(logits)?;
    Ok(AggregationWeights {
        alpha,
        table: table.clone(),
    })
}

fn params_in_width<T: Real>(g: &Graph<T>, params: &Bound, prefix: &str) -> Result<usize> {
    Ok(g.shape(params.var(&format!("{prefix}.0.w"))?)[0])
}

/// Coordinates, features and flow aggregated with one weight instance.
#[derive(Clone, Debug)]
pub struct UpsampleResult {
    pub coords_up: Var,
    pub feats_up: Var,
    pub flow_up: Var,
    /// The weights every output above was built from.
    pub weights: Var,
}

fn aggregate<T: Real>(g: &mut Graph<T>, w: &AggregationWeights, values: Var) -> Result<Var> {
    let gathered = g.gather(values, &w.table)?;
    g.weighted_sum(w.alpha, gathered)
}

/// Aggregates coarse coordinates, estimator features and flow with the
/// same weights.
pub fn wsa_upsample<T: Real>(
    g: &mut Graph<T>,
    weights: &AggregationWeights,
    coarse_points: Var,
    coarse_est_feats: Var,
    coarse_flow: Var,
) -> Result<UpsampleResult> {
    let rows = g.shape(coarse_points)[0];
    if g.shape(coarse_est_feats)[0] != rows
        || g.shape(coarse_flow) != [rows, 3]
        || g.shape(coarse_points) != [rows, 3]
    {
        return Err(Error::Argument(format!(
            "coarse inputs disagree: points {:?}, features {:?}, flow {:?}",
            g.shape(coarse_points),
            g.shape(coarse_est_feats),
            g.shape(coarse_flow)
        )));
    }
    if weights.table.max_index().is_some_and(|m| m >= rows) {
        return Err(Error::Argument(format!(
            "weights reference coarse point beyond {rows}"
        )));
    }
    Ok(UpsampleResult {
        coords_up: aggregate(g, weights, coarse_points)?,
        feats_up: aggregate(g, weights, coarse_est_feats)?,
        flow_up: aggregate(g, weights, coarse_flow)?,
        weights: weights.alpha,
    })
}

/// Baseline upsampling with separate weights for features and flow and no
/// coordinate aggregation.
pub fn independent_upsample<T: Real>(
    g: &mut Graph<T>,
    feat_weights: &AggregationWeights,
    flow_weights: &AggregationWeights,
    coarse_est_feats: Var,
    coarse_flow: Var,
) -> Result<(Var, Var)> {
    Ok((
        aggregate(g, feat_weights, coarse_est_feats)?,
        aggregate(g, flow_weights, coarse_flow)?,
    ))
}

/// `‖Σ α_k s_k - s_center‖` with `s = (R - I) p + t`.
pub fn verify_rigidity_identity(
    motion: &RigidMotion,
    neighbors: &[Point],
    center: &Point,
    weights: &[f64],
) -> Result<f64> {
    if neighbors.is_empty() || neighbors.len() != weights.len() {
        return Err(Error::Argument(format!(
            "{} neighbours with {} weights",
            neighbors.len(),
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if !((total - 1.0).abs() <= 1e-9) {
        return Err(Error::Contract(format!(
            "aggregation weights sum to {total}, not 1"
        )));
    }
    let mut agg = Vector3::zeros();
    for (p, &a) in neighbors.iter().zip(weights) {
        agg += Vector3::from(motion.flow_at(p)) * a;
    }
    Ok((agg - Vector3::from(motion.flow_at(center))).norm())
}

/// One randomized instance of the identity check.
#[derive(Clone, Debug)]
pub struct RigidityTrial {
    pub motion: RigidMotion,
    pub neighbors: Vec<Point>,
    pub weights: Vec<f64>,
    /// Satisfies `Σ α_k p_k = center` up to rounding.
    pub center: Point,
}

impl RigidityTrial {
    /// Random motion, `k` neighbours in a 20 m cube, strictly positive convex
    /// weights; the center is placed at the weighted mean so the barycentric
    /// condition holds by construction.
    pub fn sample<R: Rng>(rng: &mut R, k: usize) -> Self {
        let t: [f64; 3] = std::array::from_fn(|_| rng.random_range(-10.0..10.0));
        let motion = random_rotation_with(rng).with_translation(t);
        let neighbors: Vec<Point> = (0..k)
            .map(|_| std::array::from_fn(|_| rng.random_range(-10.0..10.0)))
            .collect();
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mut center = [0.0; 3];
        for (p, &a) in neighbors.iter().zip(&weights) {
            for c in 0..3 {
                center[c] += a * p[c];
            }
        }
        Self {
            motion,
            neighbors,
            weights,
            center,
        }
    }

    pub fn residual(&self) -> Result<f64> {
        verify_rigidity_identity(&self.motion, &self.neighbors, &self.center, &self.weights)
    }

    /// Residual when the claimed center is off by `e`
    /// (`Σ α_k p_k = center + e`), together with `‖(R - I) e‖`.
    pub fn perturbed_residual(&self, e: [f64; 3]) -> Result<(f64, f64)> {
        let center = [
            self.center[0] - e[0],
            self.center[1] - e[1],
            self.center[2] - e[2],
        ];
        let r = verify_rigidity_identity(&self.motion, &self.neighbors, &center, &self.weights)?;
        let expected = ((self.motion.rotation() - nalgebra::Matrix3::identity()) * Vector3::from(e))
            .norm();
        Ok((r, expected))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{knn, PointCloud};
    use crate::nn::ParamStore;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap()
    }

    struct Setup {
        g: Graph<f64>,
        weights: AggregationWeights,
        coarse: Var,
        feats: Var,
        flow: Var,
    }

    fn setup(store: &ParamStore<f64>, seed: u64) -> Setup {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fine = cloud(&mut rng, 10);
        let coarse_cloud = cloud(&mut rng, 5);
        let table = knn(&fine, &coarse_cloud, 3).unwrap();
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let f = g.constant(fine.to_tensor());
        let coarse = g.constant(coarse_cloud.to_tensor());
        let feats = g.constant(
            Tensor::new(vec![5, 4], (0..20).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap(),
        );
        let flow = g.constant(Tensor::new(vec![5, 3], vec![0.2; 15]).unwrap());
        let weights = compute_weights(
            &mut g,
            &b,
            "wsa",
            f,
            coarse,
            feats,
            &table,
            Activation::LeakyRelu(0.1),
        )
        .unwrap();
        Setup {
            g,
            weights,
            coarse,
            feats,
            flow,
        }
    }

    #[test]
    fn zero_network_gives_uniform_weights() {
        let store = ParamStore::<f64>::zeros(&weight_specs("wsa", 4, 6));
        let s = setup(&store, 1);
        for &a in s.g.value(s.weights.alpha()).data() {
            assert!((a - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rows_are_convex() {
        let store = ParamStore::<f64>::init(&weight_specs("wsa", 4, 6), 2).unwrap();
        let s = setup(&store, 2);
        let a = s.g.value(s.weights.alpha());
        for r in 0..a.rows() {
            assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(a.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn shifting_logits_keeps_weights() {
        let mut store = ParamStore::<f64>::init(&weight_specs("wsa", 4, 6), 3).unwrap();
        let base = {
            let s = setup(&store, 3);
            s.g.value(s.weights.alpha()).clone()
        };
        // A constant added to the last bias raises every logit equally.
        store.get_mut("wsa.1.b").unwrap().data_mut().iter_mut().for_each(|b| *b += 2.5);
        let s = setup(&store, 3);
        for (x, y) in base.data().iter().zip(s.g.value(s.weights.alpha()).data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn all_outputs_share_one_weight_instance() {
        let store = ParamStore::<f64>::init(&weight_specs("wsa", 4, 6), 4).unwrap();
        let mut s = setup(&store, 4);
        let up = wsa_upsample(&mut s.g, &s.weights, s.coarse, s.feats, s.flow).unwrap();
        assert_eq!(up.weights, s.weights.alpha());
        for out in [up.coords_up, up.feats_up, up.flow_up] {
            assert_eq!(s.g.op_name(out), "weighted_sum");
            assert_eq!(s.g.inputs(out)[0], s.weights.alpha());
        }
        // Constant coarse flow is reproduced exactly.
        for &v in s.g.value(up.flow_up).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn one_hot_weights_copy_a_neighbour() {
        let mut g = Graph::<f64>::new();
        let table = IndexTable::from_rows(&[vec![2, 0, 1]]).unwrap();
        let alpha = g.constant(Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap());
        let w = AggregationWeights::from_parts(&g, alpha, table).unwrap();
        let pts = g.constant(Tensor::from_rows(&[[1., 2., 3.], [4., 5., 6.], [7., 8., 9.]]).unwrap());
        let fe = g.constant(Tensor::from_rows(&[[1.0], [2.0], [3.0]]).unwrap());
        let fl = g.constant(Tensor::from_rows(&[[0.1, 0., 0.], [0.2, 0., 0.], [0.3, 0., 0.]]).unwrap());
        let up = wsa_upsample(&mut g, &w, pts, fe, fl).unwrap();
        assert_eq!(g.value(up.coords_up).data(), &[1., 2., 3.]);
        assert_eq!(g.value(up.feats_up).data(), &[1.0]);
        assert_eq!(g.value(up.flow_up).data(), &[0.1, 0., 0.]);
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let store = ParamStore::<f64>::init(&weight_specs("wsa", 4, 6), 5).unwrap();
        let mut s = setup(&store, 5);
        let short = s.g.constant(Tensor::zeros(&[4, 3]));
        assert!(matches!(
            wsa_upsample(&mut s.g, &s.weights, s.coarse, s.feats, short),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn identity_rotation_has_zero_residual() {
        let m = RigidMotion::identity().with_translation([3.0, -1.0, 2.0]);
        let r = verify_rigidity_identity(
            &m,
            &[[1., 2., 3.], [4., 5., 6.]],
            &[100., 0., 0.],
            &[0.25, 0.75],
        )
        .unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn weights_must_sum_to_one() {
        let m = RigidMotion::identity();
        assert!(matches!(
            verify_rigidity_identity(&m, &[[0.; 3], [1.; 3]], &[0.; 3], &[0.5, 0.6]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn trials_satisfy_identity_and_perturbation_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let t = RigidityTrial::sample(&mut rng, 8);
            assert!(t.residual().unwrap() < 1e-10);
            let e = [0.3, -0.2, 0.5];
            let (r, expected) = t.perturbed_residual(e).unwrap();
            assert!((r - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn affine_flow_is_reproduced() {
        // s_k = A p_k + b with barycentric weights gives A p_i + b.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = nalgebra::Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let b = Vector3::new(0.3, -0.4, 0.1);
        let t = RigidityTrial::sample(&mut rng, 6);
        let k = t.neighbors.len();
        let mut g = Graph::<f64>::new();
        let table = IndexTable::new(1, k, (0..k).collect()).unwrap();
        let alpha = g.constant(Tensor::new(vec![1, k], t.weights.clone()).unwrap());
        let w = AggregationWeights::from_parts(&g, alpha, table).unwrap();
        let pts: Vec<[f64; 3]> = t.neighbors.clone();
        let flows: Vec<[f64; 3]> = pts
            .iter()
            .map(|p| {
                let v = a * Vector3::from(*p) + b;
                [v.x, v.y, v.z]
            })
            .collect();
        let pv = g.constant(Tensor::from_rows(&pts).unwrap());
        let fv = g.constant(Tensor::from_rows(&flows).unwrap());
        let up = wsa_upsample(&mut g, &w, pv, pv, fv).unwrap();
        let want = a * Vector3::from(t.center) + b;
        let got = g.value(up.flow_up).data();
        for c in 0..3 {
            assert!((got[c] - want[c]).abs() < 1e-6);
        }
    }
}
