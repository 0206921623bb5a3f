//! Patch-to-dilated-patch matching cost between a warped source level and
//! the target level at the same pyramid depth.
//!
//! Stage 1 scores every warped source point against its `k_target` nearest
//! target points: a shared MLP over `[f_src, f_tgt, q_k - p_i^w]` gives a
//! per-pair cost, a learned scalar score turned into softmax weights pools
//! them. Stage 2 pools the stage-1 costs of a dilated source neighbourhood
//! (every `dilation`-th of the `dilation * k_dilated` nearest source
//! points) with a second MLP and softmax weighting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{knn, PointCloud};
use crate::nn::{linear, linear_specs, mlp, mlp_specs, Bound, ParamSpec};
use crate::tensor::{Activation, Graph, IndexTable, Real, Var};

/// How relative offsets enter the cost MLPs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetEncoding {
    /// The raw 3-vector `q_k - p_i^w`.
    Vector,
    /// Only its length, which makes the cost invariant to rigid motions
    /// applied jointly to source and target.
    Distance,
}

impl OffsetEncoding {
    pub fn width(self) -> usize {
        match self {
            OffsetEncoding::Vector => 3,
            OffsetEncoding::Distance => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostVolumeConfig {
    pub k_target: usize,
    pub k_dilated: usize,
    pub dilation: usize,
    pub channels: usize,
    pub offsets: OffsetEncoding,
    pub act: Activation,
}

pub fn cost_volume_specs(prefix: &str, feat_channels: usize, cfg: &CostVolumeConfig) -> Vec<ParamSpec> {
    let ow = cfg.offsets.width();
    let c = cfg.channels;
    let mut specs = mlp_specs(&format!("{prefix}.pair"), &[2 * feat_channels + ow, c, c]);
    specs.extend(linear_specs(&format!("{prefix}.pair_score"), c, 1));
    specs.extend(mlp_specs(&format!("{prefix}.patch"), &[c + ow, c, c]));
    specs.extend(linear_specs(&format!("{prefix}.patch_score"), c, 1));
    specs
}

/// Column positions `0, d, 2d, ..` inside the nearest `min(d * k, n)`
/// candidates.
pub fn dilated_columns(k: usize, dilation: usize, n: usize) -> Vec<usize> {
    let d = dilation.max(1);
    let candidates = (d * k).min(n);
    (0..candidates).step_by(d).collect()
}

fn encode_offsets<T: Real>(g: &mut Graph<T>, off: Var, enc: OffsetEncoding) -> Result<Var> {
    match enc {
        OffsetEncoding::Vector => Ok(off),
        OffsetEncoding::Distance => {
            let s = g.shape(off).to_vec();
            let d = g.row_norm(off)?;
            g.reshape(d, vec![s[0], s[1], 1])
        }
    }
}

/// Softmax-pooled MLP over a gathered neighbourhood `x: [N, K, C]`.
fn attend<T: Real>(
    g: &mut Graph<T>,
    params: &Bound,
    mlp_prefix: &str,
    score_prefix: &str,
    x: Var,
    act: Activation,
) -> Result<(Var, Var)> {
    let s = g.shape(x).to_vec();
    let h = mlp(g, params, mlp_prefix, x, 2, act, true)?;
    let score = linear(g, params, score_prefix, h)?;
    let score = g.reshape(score, vec![s[0], s[1]])?;
    let w = g.softmax(score)?;
    Ok((g.weighted_sum(w, h)?, w))
}

/// Output of [`cost_volume`].
pub struct CostVolume {
    /// `[N, channels]` per warped source point.
    pub values: Var,
    pub pair_weights: Var,
    pub patch_weights: Var,
}

/// Matching cost of `warped: [N, 3]` (with features `src_feats`) against
/// `target: [M, 3]` (with `tgt_feats`). Neighbour tables are recomputed from
/// the current coordinate values; gradients flow through the offsets and
/// features.
#[allow(clippy::too_many_arguments)]
pub fn cost_volume<T: Real>(
    g: &mut Graph<T>,
    params: &Bound,
    prefix: &str,
    cfg: &CostVolumeConfig,
    warped: Var,
    src_feats: Var,
    target: Var,
    tgt_feats: Var,
) -> Result<CostVolume> {
    let warped_cloud = PointCloud::from_tensor(g.value(warped))?;
    let target_cloud = PointCloud::from_tensor(g.value(target))?;
    let n = warped_cloud.len();
    if cfg.k_target > target_cloud.len() {
        return Err(Error::Config(format!(
            "cost volume K = {} exceeds {} target points",
            cfg.k_target,
            target_cloud.len()
        )));
    }
    if g.shape(src_feats)[0] != n || g.shape(tgt_feats)[0] != target_cloud.len() {
        return Err(Error::Dimension(
            "cost volume features do not match their point sets".into(),
        ));
    }

    // Stage 1: point to target patch.
    let k1 = cfg.k_target;
    let t1 = knn(&warped_cloud, &target_cloud, k1)?;
    let self1 = IndexTable::repeat_self(n, k1);
    let q = g.gather(target, t1.indices())?;
    let c = g.gather(warped, &self1)?;
    let off = g.sub(q, c)?;
    let off = encode_offsets(g, off, cfg.offsets)?;
    let fs = g.gather(src_feats, &self1)?;
    let ft = g.gather(tgt_feats, t1.indices())?;
    let x1 = g.concat(&[fs, ft, off])?;
    let (point_cost, pair_weights) = attend(
        g,
        params,
        &format!("{prefix}.pair"),
        &format!("{prefix}.pair_score"),
        x1,
        cfg.act,
    )?;

    // Stage 2: aggregate over a dilated source patch.
    let cols = dilated_columns(cfg.k_dilated, cfg.dilation, n);
    let wide = knn(&warped_cloud, &warped_cloud, cols.last().map_or(1, |c| c + 1))?;
    let t2 = wide.indices().select_cols(&cols)?;
    let self2 = IndexTable::repeat_self(n, t2.cols());
    let nb = g.gather(warped, &t2)?;
    let ctr = g.gather(warped, &self2)?;
    let off2 = g.sub(nb, ctr)?;
    let off2 = encode_offsets(g, off2, cfg.offsets)?;
    let costs = g.gather(point_cost, &t2)?;
    let x2 = g.concat(&[costs, off2])?;
    let (values, patch_weights) = attend(
        g,
        params,
        &format!("{prefix}.patch"),
        &format!("{prefix}.patch_score"),
        x2,
        cfg.act,
    )?;
    Ok(CostVolume {
        values,
        pair_weights,
        patch_weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_rigid, random_rotation};
    use crate::nn::ParamStore;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(offsets: OffsetEncoding) -> CostVolumeConfig {
        CostVolumeConfig {
            k_target: 6,
            k_dilated: 3,
            dilation: 2,
            channels: 5,
            offsets,
            act: Activation::LeakyRelu(0.1),
        }
    }

    fn random_points(n: usize, rng: &mut ChaCha8Rng) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap()
    }

    fn random_feats(n: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::new(vec![n, c], (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn run(
        store: &ParamStore<f64>,
        cfg: &CostVolumeConfig,
        src: &PointCloud,
        tgt: &PointCloud,
        fs: &Tensor<f64>,
        ft: &Tensor<f64>,
    ) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let w = g.constant(src.to_tensor());
        let t = g.constant(tgt.to_tensor());
        let a = g.constant(fs.clone());
        let c = g.constant(ft.clone());
        let cv = cost_volume(&mut g, &b, "cv", cfg, w, a, t, c).unwrap();
        (
            g.value(cv.values).clone(),
            g.value(cv.pair_weights).clone(),
            g.value(cv.patch_weights).clone(),
        )
    }

    #[test]
    fn dilated_columns_cover_strided_candidates() {
        assert_eq!(dilated_columns(8, 2, 100), vec![0, 2, 4, 6, 8, 10, 12, 14]);
        assert_eq!(dilated_columns(8, 2, 4), vec![0, 2]);
        assert_eq!(dilated_columns(3, 1, 10), vec![0, 1, 2]);
    }

    #[test]
    fn zero_final_layer_gives_zero_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = cfg(OffsetEncoding::Vector);
        let mut store = ParamStore::<f64>::init(&cost_volume_specs("cv", 4, &c), 2).unwrap();
        for name in ["cv.patch.1.w", "cv.patch.1.b"] {
            store.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let (src, tgt) = (random_points(12, &mut rng), random_points(10, &mut rng));
        let (fs, ft) = (random_feats(12, 4, &mut rng), random_feats(10, 4, &mut rng));
        let (v, _, _) = run(&store, &c, &src, &tgt, &fs, &ft);
        assert_eq!(v.shape(), &[12, 5]);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn softmax_weightings_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = cfg(OffsetEncoding::Vector);
        let store = ParamStore::<f64>::init(&cost_volume_specs("cv", 4, &c), 5).unwrap();
        let (src, tgt) = (random_points(12, &mut rng), random_points(10, &mut rng));
        let (fs, ft) = (random_feats(12, 4, &mut rng), random_feats(10, 4, &mut rng));
        let (_, w1, w2) = run(&store, &c, &src, &tgt, &fs, &ft);
        for w in [w1, w2] {
            for r in 0..w.rows() {
                let s: f64 = w.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(w.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn symmetric_points_get_identical_cost() {
        // A square and its features are symmetric under the 90° rotation
        // about z; distance-encoded offsets see every corner identically.
        let sq = PointCloud::new(vec![[1., 0., 0.], [0., 1., 0.], [-1., 0., 0.], [0., -1., 0.]])
            .unwrap();
        let mut c = cfg(OffsetEncoding::Distance);
        c.k_target = 4;
        c.k_dilated = 2;
        let feats = Tensor::full(&[4, 4], 0.3);
        let store = ParamStore::<f64>::init(&cost_volume_specs("cv", 4, &c), 8).unwrap();
        let (v, _, _) = run(&store, &c, &sq, &sq, &feats, &feats);
        for r in 1..4 {
            for (a, b) in v.row(0).iter().zip(v.row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn joint_translation_leaves_cost_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = cfg(OffsetEncoding::Vector);
        let store = ParamStore::<f64>::init(&cost_volume_specs("cv", 4, &c), 6).unwrap();
        let (src, tgt) = (random_points(16, &mut rng), random_points(14, &mut rng));
        let (fs, ft) = (random_feats(16, 4, &mut rng), random_feats(14, 4, &mut rng));
        let (a, _, _) = run(&store, &c, &src, &tgt, &fs, &ft);
        let shift = [0.7, -2.0, 1.3];
        let (b, _, _) = run(&store, &c, &src.translate(shift), &tgt.translate(shift), &fs, &ft);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn joint_rigid_motion_leaves_distance_encoded_cost_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = cfg(OffsetEncoding::Distance);
        let store = ParamStore::<f64>::init(&cost_volume_specs("cv", 4, &c), 7).unwrap();
        let (src, tgt) = (random_points(16, &mut rng), random_points(14, &mut rng));
        let (fs, ft) = (random_feats(16, 4, &mut rng), random_feats(14, 4, &mut rng));
        let (a, _, _) = run(&store, &c, &src, &tgt, &fs, &ft);
        let m = random_rotation(11).with_translation([0.5, 0.1, -0.3]);
        let (b, _, _) = run(&store, &c, &apply_rigid(&src, &m), &apply_rigid(&tgt, &m), &fs, &ft);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn oversized_k_is_a_configuration_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut c = cfg(OffsetEncoding::Vector);
        c.k_target = 20;
        let store = ParamStore::<f64>::init(&cost_volume_specs("cv", 4, &c), 1).unwrap();
        let (src, tgt) = (random_points(8, &mut rng), random_points(8, &mut rng));
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let w = g.constant(src.to_tensor());
        let t = g.constant(tgt.to_tensor());
        let a = g.constant(random_feats(8, 4, &mut rng));
        let f = g.constant(random_feats(8, 4, &mut rng));
        assert!(matches!(
            cost_volume(&mut g, &b, "cv", &c, w, a, t, f),
            Err(Error::Config(_))
        ));
    }
}
