//! Deformation degree: how much the local structure around each point
//! changes when the cloud is warped by a flow field.
//!
//! The local structure of point `i` keeps one entry per neighbour:
//! `|p_k - p_i| / C` per coordinate channel (`C = 3`), or the Euclidean
//! distance in the [`StructureNorm::Euclidean`] variant. The deformation
//! degree is the elementwise magnitude of the difference between the source
//! and warped structures. It has no learnable parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{knn, PointCloud};
use crate::tensor::{Graph, IndexTable, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureNorm {
    /// Per-channel absolute difference divided by the channel count.
    #[default]
    PerChannel,
    /// One Euclidean distance per neighbour.
    Euclidean,
}

impl StructureNorm {
    pub fn channels(self) -> usize {
        match self {
            StructureNorm::PerChannel => 3,
            StructureNorm::Euclidean => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeformConfig {
    pub k: usize,
    /// Recompute neighbours on the warped cloud instead of reusing the
    /// source neighbourhoods.
    pub recompute_knn: bool,
    pub norm: StructureNorm,
}

/// `[N, K, C]` local structure of `points: [N, 3]` under `table`.
pub fn local_structure<T: Real>(
    g: &mut Graph<T>,
    points: Var,
    table: &IndexTable,
    norm: StructureNorm,
) -> Result<Var> {
    let n = g.shape(points)[0];
    if table.rows() != n {
        return Err(Error::Index(format!(
            "neighbour table has {} rows for {n} points",
            table.rows()
        )));
    }
    let nb = g.gather(points, table)?;
    let ctr = g.gather(points, &IndexTable::repeat_self(n, table.cols()))?;
    let diff = g.sub(nb, ctr)?;
    match norm {
        StructureNorm::PerChannel => {
            let a = g.abs(diff)?;
            g.scale(a, 1.0 / 3.0)
        }
        StructureNorm::Euclidean => {
            let d = g.row_norm(diff)?;
            g.reshape(d, vec![n, table.cols(), 1])
        }
    }
}

/// `|source - warped|` elementwise.
pub fn deformation_degree<T: Real>(g: &mut Graph<T>, source: Var, warped: Var) -> Result<Var> {
    if g.shape(source) != g.shape(warped) {
        return Err(Error::Argument(format!(
            "local structures differ in shape: {:?} vs {:?}",
            g.shape(source),
            g.shape(warped)
        )));
    }
    let d = g.sub(source, warped)?;
    g.abs(d)
}

/// `[N, K, C] -> [N, K * C]` view for the estimator.
pub fn flatten<T: Real>(g: &mut Graph<T>, dd: Var) -> Result<Var> {
    let s = g.shape(dd).to_vec();
    g.reshape(dd, vec![s[0], s[1] * s[2]])
}

/// Deformation degree of `points` warped by `flow: [N, 3]`. `k` is capped
/// by the cloud size. Returns `[N, K, C]`.
pub fn deformation_from_flow<T: Real>(
    g: &mut Graph<T>,
    cloud: &PointCloud,
    points: Var,
    flow: Var,
    cfg: &DeformConfig,
) -> Result<Var> {
    let k = cfg.k.min(cloud.len());
    let table = knn(cloud, cloud, k)?;
    let source = local_structure(g, points, table.indices(), cfg.norm)?;
    let warped = g.add(points, flow)?;
    let warped_table = if cfg.recompute_knn {
        let wc = PointCloud::from_tensor(g.value(warped))?;
        knn(&wc, &wc, k)?.indices().clone()
    } else {
        table.indices().clone()
    };
    let moved = local_structure(g, warped, &warped_table, cfg.norm)?;
    deformation_degree(g, source, moved)
}

/// Value-level local structure of a cloud.
pub fn local_structure_values(
    cloud: &PointCloud,
    table: &IndexTable,
    norm: StructureNorm,
) -> Result<Tensor<f64>> {
    let mut g = Graph::new();
    let p = g.constant(cloud.to_tensor());
    let s = local_structure(&mut g, p, table, norm)?;
    Ok(g.value(s).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{random_rotation, FlowField};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0)))
                .collect(),
        )
        .unwrap()
    }

    fn dd_for(c: &PointCloud, flow: &FlowField, norm: StructureNorm) -> Tensor<f64> {
        let mut g = Graph::<f64>::new();
        let p = g.constant(c.to_tensor());
        let f = g.constant(flow.to_tensor().unwrap());
        let cfg = DeformConfig {
            k: 6,
            recompute_knn: false,
            norm,
        };
        let d = deformation_from_flow(&mut g, c, p, f, &cfg).unwrap();
        g.value(d).clone()
    }

    #[test]
    fn structure_examples() {
        let c = PointCloud::new(vec![[0., 0., 0.], [3., 0., -6.]]).unwrap();
        let table = IndexTable::from_rows(&[vec![0, 1], vec![1, 0]]).unwrap();
        let s = local_structure_values(&c, &table, StructureNorm::PerChannel).unwrap();
        assert_eq!(s.shape(), &[2, 2, 3]);
        // self entry is zero, the neighbour entry is |Δ| / 3
        assert_eq!(&s.data()[..6], &[0.0, 0.0, 0.0, 1.0, 0.0, 2.0]);
        let moved = local_structure_values(&c.translate([5., -3., 1.]), &table, StructureNorm::PerChannel)
            .unwrap();
        assert_eq!(moved, s);
    }

    #[test]
    fn invalid_index_is_an_error() {
        let c = PointCloud::new(vec![[0.; 3], [1.; 3]]).unwrap();
        let table = IndexTable::from_rows(&[vec![0, 5], vec![1, 0]]).unwrap();
        assert!(matches!(
            local_structure_values(&c, &table, StructureNorm::PerChannel),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn zero_flow_gives_exact_zero() {
        let c = cloud(1, 30);
        let d = dd_for(&c, &FlowField::zeros(30), StructureNorm::PerChannel);
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn translation_flow_is_undeformed() {
        let c = cloud(2, 30);
        let f = FlowField::new(vec![[0.4, -1.2, 0.7]; 30]).unwrap();
        let d = dd_for(&c, &f, StructureNorm::PerChannel);
        assert!(d.data().iter().all(|&v| v < 1e-6));
    }

    #[test]
    fn doubling_flow_reproduces_source_structure() {
        let c = cloud(3, 25);
        let f = FlowField::new(c.points().to_vec()).unwrap();
        let d = dd_for(&c, &f, StructureNorm::PerChannel);
        let table = knn(&c, &c, 6).unwrap();
        let s = local_structure_values(&c, table.indices(), StructureNorm::PerChannel).unwrap();
        for (a, b) in d.data().iter().zip(s.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_separates_the_two_norms() {
        let c = cloud(4, 25);
        let m = random_rotation(17);
        let f = FlowField::new(c.points().iter().map(|p| m.flow_at(p)).collect()).unwrap();
        let per_channel = dd_for(&c, &f, StructureNorm::PerChannel);
        let euclid = dd_for(&c, &f, StructureNorm::Euclidean);
        assert!(per_channel.data().iter().any(|&v| v > 1e-3));
        assert!(euclid.data().iter().all(|&v| v < 1e-12));
    }

    #[test]
    fn shape_mismatch_is_an_argument_error() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3, 3]));
        let b = g.constant(Tensor::zeros(&[2, 2, 3]));
        assert!(matches!(deformation_degree(&mut g, a, b), Err(Error::Argument(_))));
    }
}
