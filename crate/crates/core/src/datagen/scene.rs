use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{random_rotation_with, FlowField, Point, PointCloud, RigidMotion};

/// Parameters of a synthetic multi-object scene. Lengths in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub num_points: usize,
    pub num_objects: usize,
    /// Largest half-extent of an object along any axis.
    pub object_extent: f64,
    /// Objects are centred inside `[-scene_extent, scene_extent]` in x and z.
    pub scene_extent: f64,
    /// Bound on each object's rotation angle, radians.
    pub max_rotation: f64,
    /// Bound on each translation component.
    pub max_translation: f64,
    /// Share of points on the ground plane.
    pub background_fraction: f64,
    /// Give the ground plane its own rigid motion instead of the identity.
    pub background_motion: bool,
    /// Gaussian noise added to the source after the flow is computed.
    pub jitter: f64,
    /// Draw the target from fresh surface samples instead of moving the
    /// source points.
    pub resample_target: bool,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_points: 512,
            num_objects: 4,
            object_extent: 0.5,
            scene_extent: 1.5,
            max_rotation: 0.2,
            max_translation: 0.3,
            background_fraction: 0.25,
            background_motion: false,
            jitter: 0.0,
            resample_target: false,
            seed: 0,
        }
    }
}

/// Fewest points an object may receive.
pub const MIN_OBJECT_POINTS: usize = 8;

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let lengths = [
            ("object_extent", self.object_extent),
            ("scene_extent", self.scene_extent),
            ("max_rotation", self.max_rotation),
            ("max_translation", self.max_translation),
            ("jitter", self.jitter),
        ];
        for (name, v) in lengths {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Argument(format!("{name} = {v} must be a nonnegative number")));
            }
        }
        if !(0.0..=1.0).contains(&self.background_fraction) {
            return Err(Error::Argument(format!(
                "background_fraction = {} outside [0, 1]",
                self.background_fraction
            )));
        }
        if self.num_points == 0 {
            return Err(Error::Argument("num_points must be positive".into()));
        }
        let (_, per_object) = self.split();
        if self.num_objects > 0 && per_object.iter().any(|&n| n < MIN_OBJECT_POINTS) {
            return Err(Error::Argument(format!(
                "{} objects need at least {} points each, budget leaves {}",
                self.num_objects,
                MIN_OBJECT_POINTS,
                per_object.iter().min().copied().unwrap_or(0)
            )));
        }
        if self.num_objects == 0 && self.background_fraction < 1.0 {
            return Err(Error::Argument(
                "a scene without objects must be all background".into(),
            ));
        }
        if self.num_objects > u16::MAX as usize - 1 {
            return Err(Error::Argument("too many objects for u16 labels".into()));
        }
        Ok(())
    }

    /// Background point count and per-object point counts.
    fn split(&self) -> (usize, Vec<usize>) {
        let background = if self.num_objects == 0 {
            self.num_points
        } else {
            (self.num_points as f64 * self.background_fraction).round() as usize
        };
        let rest = self.num_points - background.min(self.num_points);
        let per: Vec<usize> = (0..self.num_objects)
            .map(|j| rest / self.num_objects + usize::from(j < rest % self.num_objects))
            .collect();
        (background, per)
    }
}

/// Source, target and exact flow of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub source: PointCloud,
    pub target: PointCloud,
    pub flow: FlowField,
    /// 0 for background, `j + 1` for object `j`.
    pub labels: Vec<u16>,
}

impl SamplePair {
    pub fn new(source: PointCloud, target: PointCloud, flow: FlowField, labels: Vec<u16>) -> Result<Self> {
        if flow.len() != source.len() || labels.len() != source.len() {
            return Err(Error::Argument(format!(
                "{} source points, {} flow vectors, {} labels",
                source.len(),
                flow.len(),
                labels.len()
            )));
        }
        Ok(Self {
            source,
            target,
            flow,
            labels,
        })
    }

    /// The arrays as they are stored on disk (32-bit floats).
    pub fn quantized(&self) -> SamplePair {
        let q = |p: &[Point]| -> Vec<Point> {
            p.iter().map(|v| v.map(|c| c as f32 as f64)).collect()
        };
        SamplePair {
            source: PointCloud::new(q(self.source.points())).expect("finite"),
            target: PointCloud::new(q(self.target.points())).expect("finite"),
            flow: FlowField::new(q(self.flow.vectors())).expect("finite"),
            labels: self.labels.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Box,
    Ellipsoid,
}

/// A closed surface with its pose in the first frame.
#[derive(Clone, Debug)]
struct Solid {
    shape: Shape,
    half: [f64; 3],
    pose: RigidMotion,
}

impl Solid {
    fn sample<R: Rng>(&self, rng: &mut R) -> Point {
        let h = self.half;
        let local = match self.shape {
            Shape::Ellipsoid => {
                let d: [f64; 3] = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal));
                let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-12);
                std::array::from_fn(|j| h[j] * d[j] / n)
            }
            Shape::Box => {
                // face pairs weighted by area
                let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let total: f64 = areas.iter().sum();
                let mut u = rng.random_range(0.0..total);
                let mut axis = 2;
                for (j, a) in areas.iter().enumerate() {
                    if u < *a {
                        axis = j;
                        break;
                    }
                    u -= a;
                }
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                std::array::from_fn(|j| {
                    if j == axis {
                        sign * h[j]
                    } else {
                        rng.random_range(-h[j]..=h[j])
                    }
                })
            }
        };
        self.pose.apply(&local)
    }
}

const GROUND_HEIGHT: f64 = -1.0;

fn random_motion<R: Rng>(rng: &mut R, cfg: &SceneConfig, center: &Point) -> Result<RigidMotion> {
    let d: [f64; 3] = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal));
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-12);
    let axis = d.map(|v| v / n);
    let angle = if cfg.max_rotation > 0.0 {
        rng.random_range(-cfg.max_rotation..=cfg.max_rotation)
    } else {
        0.0
    };
    let t: [f64; 3] = std::array::from_fn(|_| {
        if cfg.max_translation > 0.0 {
            rng.random_range(-cfg.max_translation..=cfg.max_translation)
        } else {
            0.0
        }
    });
    // rotate about the object centre: p' = R (p - c) + c + t
    let about_origin = RigidMotion::from_axis_angle(axis, angle, [0.0; 3])?;
    let rc = about_origin.apply(center);
    Ok(about_origin.with_translation(std::array::from_fn(|j| center[j] - rc[j] + t[j])))
}

/// Generates one scene. A pure function of `cfg`.
pub fn generate_scene(cfg: &SceneConfig) -> Result<SamplePair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n_background, per_object) = cfg.split();

    let mut solids = Vec::with_capacity(cfg.num_objects);
    let mut motions = Vec::with_capacity(cfg.num_objects);
    for _ in 0..cfg.num_objects {
        let half: [f64; 3] = std::array::from_fn(|_| {
            cfg.object_extent * rng.random_range(0.4..=1.0)
        });
        let se = cfg.scene_extent;
        let center = [
            rng.random_range(-se..=se),
            rng.random_range(GROUND_HEIGHT + 0.5..=0.5),
            rng.random_range(-se..=se),
        ];
        let orient = random_rotation_with(&mut rng);
        let shape = if rng.random_bool(0.5) { Shape::Box } else { Shape::Ellipsoid };
        solids.push(Solid {
            shape,
            half,
            pose: orient.with_translation(center),
        });
        motions.push(random_motion(&mut rng, cfg, &center)?);
    }
    let plane = cfg.scene_extent + cfg.object_extent;
    let ground_motion = if cfg.background_motion {
        random_motion(&mut rng, cfg, &[0.0, GROUND_HEIGHT, 0.0])?
    } else {
        RigidMotion::identity()
    };

    let mut surface_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut target_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let ground = |r: &mut ChaCha8Rng| -> Point {
        [r.random_range(-plane..=plane), GROUND_HEIGHT, r.random_range(-plane..=plane)]
    };

    let mut clean = Vec::with_capacity(cfg.num_points);
    let mut labels = Vec::with_capacity(cfg.num_points);
    let mut flows = Vec::with_capacity(cfg.num_points);
    let mut moved = Vec::with_capacity(cfg.num_points);
    for _ in 0..n_background {
        let p = ground(&mut surface_rng);
        clean.push(p);
        labels.push(0u16);
        flows.push(ground_motion.flow_at(&p));
    }
    if cfg.resample_target {
        for _ in 0..n_background {
            moved.push(ground_motion.apply(&ground(&mut target_rng)));
        }
    }
    for (j, (solid, motion)) in solids.iter().zip(&motions).enumerate() {
        for _ in 0..per_object[j] {
            let p = solid.sample(&mut surface_rng);
            clean.push(p);
            labels.push(j as u16 + 1);
            flows.push(motion.flow_at(&p));
        }
        if cfg.resample_target {
            for _ in 0..per_object[j] {
                moved.push(motion.apply(&solid.sample(&mut target_rng)));
            }
        }
    }
    if !cfg.resample_target {
        moved = clean
            .iter()
            .zip(&flows)
            .map(|(p, s)| std::array::from_fn(|j| p[j] + s[j]))
            .collect();
    }

    let mut order: Vec<usize> = (0..clean.len()).collect();
    order.shuffle(&mut rng);
    let mut target_order: Vec<usize> = (0..moved.len()).collect();
    if cfg.resample_target {
        target_order.shuffle(&mut rng);
    } else {
        target_order.clone_from(&order);
    }

    let mut source: Vec<Point> = order.iter().map(|&i| clean[i]).collect();
    if cfg.jitter > 0.0 {
        for p in &mut source {
            for c in p.iter_mut() {
                *c += cfg.jitter * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    SamplePair::new(
        PointCloud::new(source)?,
        PointCloud::new(target_order.iter().map(|&i| moved[i]).collect())?,
        FlowField::new(order.iter().map(|&i| flows[i]).collect())?,
        order.iter().map(|&i| labels[i]).collect(),
    )
}
