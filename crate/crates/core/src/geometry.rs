//! Geometric kernels: sampling, neighbourhoods, rigid motions and warping.
//!
//! Coordinates are stored as `[f64; 3]` in meters. Network code converts
//! them to tensors at the precision it runs in.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{IndexTable, Real, Tensor};

pub type Point = [f64; 3];

#[inline]
pub fn sq_dist(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Argument("point cloud must hold at least one point".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point cloud coordinates".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points at the given indices, in order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let pts = indices
            .iter()
            .map(|&i| {
                self.points
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::Index(format!("point {i} of {}", self.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(pts)
    }

    pub fn translate(&self, offset: Point) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]])
                .collect(),
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.points.iter().flatten().map(|&v| T::of(v)).collect();
        Tensor::from_parts(vec![self.len(), 3], data)
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        if t.shape().len() != 2 || t.shape()[1] != 3 {
            return Err(Error::Dimension(format!(
                "point tensor must be [N, 3], got {:?}",
                t.shape()
            )));
        }
        Self::new(
            t.data()
                .chunks(3)
                .map(|c| [c[0].as_f64(), c[1].as_f64(), c[2].as_f64()])
                .collect(),
        )
    }
}

/// Per-point displacement from frame t to t+1, in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    vectors: Vec<Point>,
}

impl FlowField {
    pub fn new(vectors: Vec<Point>) -> Result<Self> {
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow field".into()));
        }
        Ok(Self { vectors })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            vectors: vec![[0.0; 3]; n],
        }
    }

    pub fn vectors(&self) -> &[Point] {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn negate(&self) -> Self {
        Self {
            vectors: self.vectors.iter().map(|v| [-v[0], -v[1], -v[2]]).collect(),
        }
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let v = indices
            .iter()
            .map(|&i| {
                self.vectors
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::Index(format!("flow vector {i} of {}", self.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { vectors: v })
    }

    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        if self.is_empty() {
            return Err(Error::Dimension("empty flow field".into()));
        }
        let data = self.vectors.iter().flatten().map(|&v| T::of(v)).collect();
        Ok(Tensor::from_parts(vec![self.len(), 3], data))
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        if t.shape().len() != 2 || t.shape()[1] != 3 {
            return Err(Error::Dimension(format!(
                "flow tensor must be [N, 3], got {:?}",
                t.shape()
            )));
        }
        Self::new(
            t.data()
                .chunks(3)
                .map(|c| [c[0].as_f64(), c[1].as_f64(), c[2].as_f64()])
                .collect(),
        )
    }
}

/// Rotation plus translation, `p -> R p + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct RigidMotion {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidMotion {
    /// Validates `RᵀR = I` and `det R = +1` to within `1e-9`.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(ortho <= 1e-9) || !((det - 1.0).abs() <= 1e-9) {
            return Err(Error::Argument(format!(
                "not a proper rotation: |RᵀR - I| = {ortho:e}, det = {det}"
            )));
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("rigid translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Rotation by `angle` radians about `axis` (need not be normalized),
    /// followed by `translation`.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64, translation: [f64; 3]) -> Result<Self> {
        let axis = Vector3::from(axis);
        if axis.norm() == 0.0 {
            return Err(Error::Argument("rotation axis must be non-zero".into()));
        }
        let q = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        Self::new(*q.to_rotation_matrix().matrix(), Vector3::from(translation))
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn with_translation(&self, t: [f64; 3]) -> Self {
        Self {
            rotation: self.rotation,
            translation: Vector3::from(t),
        }
    }

    pub fn apply(&self, p: &Point) -> Point {
        let v = self.rotation * Vector3::from(*p) + self.translation;
        [v.x, v.y, v.z]
    }

    /// Scene flow of a point under this motion: `(R - I) p + t`.
    pub fn flow_at(&self, p: &Point) -> Point {
        let q = self.apply(p);
        [q[0] - p[0], q[1] - p[1], q[2] - p[2]]
    }
}

/// `K` nearest reference points for every query point.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborTable {
    indices: IndexTable,
    distances: Vec<f64>,
}

impl NeighborTable {
    pub fn indices(&self) -> &IndexTable {
        &self.indices
    }

    /// Row-major `[N, K]` Euclidean distances.
    pub fn distances(&self) -> &[f64] {
        &self.distances
    }

    pub fn k(&self) -> usize {
        self.indices.cols()
    }

    pub fn len(&self) -> usize {
        self.indices.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.rows() == 0
    }

    pub fn row(&self, i: usize) -> &[usize] {
        self.indices.row(i)
    }
}

/// Greedy max-min sampling. Starts at `start`; each next pick maximizes the
/// distance to the already selected set, lowest index on ties.
pub fn farthest_point_sample(cloud: &PointCloud, m: usize, start: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if m == 0 || m > n {
        return Err(Error::Argument(format!(
            "cannot sample {m} of {n} points"
        )));
    }
    if start >= n {
        return Err(Error::Index(format!("start index {start} of {n} points")));
    }
    let pts = cloud.points();
    let mut selected = Vec::with_capacity(m);
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = start;
    selected.push(current);
    for _ in 1..m {
        let c = pts[current];
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, (p, d)) in pts.iter().zip(min_d.iter_mut()).enumerate() {
            let dd = sq_dist(p, &c);
            if dd < *d {
                *d = dd;
            }
            if *d > best_d {
                best_d = *d;
                best = i;
            }
        }
        current = best;
        selected.push(current);
    }
    Ok(selected)
}

/// Exact brute-force k nearest neighbours, rows sorted by distance with
/// ties broken by lower reference index.
pub fn knn(query: &PointCloud, reference: &PointCloud, k: usize) -> Result<NeighborTable> {
    let n_ref = reference.len();
    if k == 0 || k > n_ref {
        return Err(Error::Argument(format!(
            "k = {k} invalid for a reference of {n_ref} points"
        )));
    }
    let mut indices = Vec::with_capacity(query.len() * k);
    let mut distances = Vec::with_capacity(query.len() * k);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n_ref);
    let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    for q in query.points() {
        scratch.clear();
        scratch.extend(reference.points().iter().enumerate().map(|(i, p)| (sq_dist(q, p), i)));
        if k < n_ref {
            scratch.select_nth_unstable_by(k - 1, order);
        }
        let top = &mut scratch[..k];
        top.sort_unstable_by(order);
        for &(d, i) in top.iter() {
            indices.push(i);
            distances.push(d.sqrt());
        }
    }
    Ok(NeighborTable {
        indices: IndexTable::new(query.len(), k, indices)?,
        distances,
    })
}

pub fn apply_rigid(cloud: &PointCloud, motion: &RigidMotion) -> PointCloud {
    PointCloud {
        points: cloud.points().iter().map(|p| motion.apply(p)).collect(),
    }
}

/// `p_i + s_i` for every point.
pub fn warp(cloud: &PointCloud, flow: &FlowField) -> Result<PointCloud> {
    if cloud.len() != flow.len() {
        return Err(Error::Argument(format!(
            "cannot warp {} points with {} flow vectors",
            cloud.len(),
            flow.len()
        )));
    }
    PointCloud::new(
        cloud
            .points()
            .iter()
            .zip(flow.vectors())
            .map(|(p, s)| [p[0] + s[0], p[1] + s[1], p[2] + s[2]])
            .collect(),
    )
}

/// Uniformly distributed rotation from a normalized Gaussian quaternion.
pub fn random_rotation(seed: u64) -> RigidMotion {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_rotation_with(&mut rng)
}

pub fn random_rotation_with<R: rand::Rng>(rng: &mut R) -> RigidMotion {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            continue;
        }
        let quat = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            q[0] / norm,
            q[1] / norm,
            q[2] / norm,
            q[3] / norm,
        ));
        return RigidMotion {
            rotation: *quat.to_rotation_matrix().matrix(),
            translation: Vector3::zeros(),
        };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cloud(pts: &[Point]) -> PointCloud {
        PointCloud::new(pts.to_vec()).unwrap()
    }

    #[test]
    fn fps_examples() {
        let sq = cloud(&[[0., 0., 0.], [1., 0., 0.], [0., 1., 0.], [1., 1., 0.]]);
        assert_eq!(farthest_point_sample(&sq, 2, 0).unwrap(), vec![0, 3]);
        assert_eq!(farthest_point_sample(&sq, 1, 2).unwrap(), vec![2]);
        let mut all = farthest_point_sample(&sq, 4, 0).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(matches!(
            farthest_point_sample(&sq, 5, 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn knn_examples() {
        let q = cloud(&[[0., 0., 0.]]);
        let r = cloud(&[[0., 0., 1.], [0., 0., 2.], [0., 0., 3.]]);
        let t = knn(&q, &r, 2).unwrap();
        assert_eq!(t.row(0), &[0, 1]);
        assert_eq!(t.distances(), &[1.0, 2.0]);

        let pts = cloud(&[[0., 0., 0.], [1., 2., 3.], [-1., 0.5, 2.]]);
        let own = knn(&pts, &pts, 1).unwrap();
        assert_eq!(own.indices().data(), &[0, 1, 2]);
        assert_eq!(own.distances(), &[0.0; 3]);

        let pair = cloud(&[[1., 0., 0.], [-1., 0., 0.]]);
        assert_eq!(knn(&q, &pair, 1).unwrap().row(0), &[0]);
        assert!(matches!(knn(&q, &pair, 3), Err(Error::Argument(_))));
    }

    #[test]
    fn rigid_examples() {
        let c = cloud(&[[1., 0., 0.], [0.3, -2., 5.]]);
        assert_eq!(apply_rigid(&c, &RigidMotion::identity()), c);
        let rz = RigidMotion::from_axis_angle([0., 0., 1.], std::f64::consts::FRAC_PI_2, [0.; 3])
            .unwrap();
        let p = rz.apply(&[1., 0., 0.]);
        assert!((p[0]).abs() < 1e-15 && (p[1] - 1.0).abs() < 1e-15 && p[2].abs() < 1e-15);

        let bad = Matrix3::new(1., 0., 0., 0., 1., 0., 0., 0., -1.);
        assert!(matches!(
            RigidMotion::new(bad, Vector3::zeros()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn warp_examples() {
        let c = cloud(&[[1., 2., 3.]]);
        assert_eq!(warp(&c, &FlowField::zeros(1)).unwrap(), c);
        let w = warp(&c, &FlowField::new(vec![[0.1, 0., -0.2]]).unwrap()).unwrap();
        let p = w.points()[0];
        assert!((p[0] - 1.1).abs() < 1e-15 && p[1] == 2.0 && (p[2] - 2.8).abs() < 1e-15);
        assert!(matches!(
            warp(&c, &FlowField::zeros(2)),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn warp_by_rigid_flow_equals_rigid_image() {
        let c = cloud(&[[1., 2., 3.], [-0.4, 0.2, 1.0], [2.0, -1.0, 0.5]]);
        let m = random_rotation(7).with_translation([0.3, -0.1, 0.2]);
        let flow = FlowField::new(c.points().iter().map(|p| m.flow_at(p)).collect()).unwrap();
        let warped = warp(&c, &flow).unwrap();
        for (a, b) in warped.points().iter().zip(apply_rigid(&c, &m).points()) {
            assert!(sq_dist(a, b).sqrt() < 1e-15);
        }
    }

    #[test]
    fn random_rotation_properties() {
        let r = random_rotation(42);
        let err = (r.rotation().transpose() * r.rotation() - Matrix3::identity()).abs().max();
        assert!(err < 1e-12);
        assert_eq!(random_rotation(42), r);
        assert_ne!(random_rotation(43), r);
        assert!((r.rotation().determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_rotation_trace_mean_matches_haar_expectation() {
        // E[R] = 0 under the Haar measure on SO(3), so E[tr R] = 0.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let mean = (0..n)
            .map(|_| random_rotation_with(&mut rng).rotation().trace())
            .sum::<f64>()
            / n as f64;
        assert!(mean.abs() < 0.1, "mean trace {mean}");
    }

    fn arb_cloud(max: usize) -> impl Strategy<Value = Vec<Point>> {
        prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 1..max)
    }

    proptest! {
        #[test]
        fn rigid_preserves_distances(pts in arb_cloud(20), seed in any::<u64>(),
                                     t in prop::array::uniform3(-10.0f64..10.0)) {
            let c = cloud(&pts);
            let m = random_rotation(seed).with_translation(t);
            let moved = apply_rigid(&c, &m);
            for i in 0..pts.len() {
                for j in 0..pts.len() {
                    let a = sq_dist(&pts[i], &pts[j]).sqrt();
                    let b = sq_dist(&moved.points()[i], &moved.points()[j]).sqrt();
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn warp_round_trip(pts in arb_cloud(30), flow in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 30)) {
            let c = cloud(&pts);
            let f = FlowField::new(flow[..pts.len()].to_vec()).unwrap();
            let back = warp(&warp(&c, &f).unwrap(), &f.negate()).unwrap();
            for (a, b) in back.points().iter().zip(c.points()) {
                prop_assert!(sq_dist(a, b).sqrt() < 1e-12);
            }
        }
    }
}
