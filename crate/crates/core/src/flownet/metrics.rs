use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FlowField, Point};

/// Standard 3D scene-flow metrics over one prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowMetrics {
    /// Mean end-point error in meters.
    pub epe3d: f64,
    pub acc3d_strict: f64,
    pub acc3d_relax: f64,
    pub outliers3d: f64,
}

impl FlowMetrics {
    /// Column order used in every printed table.
    pub const HEADERS: [&'static str; 4] = ["EPE3D", "Acc3DS", "Acc3DR", "Outliers3D"];

    pub fn values(&self) -> [f64; 4] {
        [self.epe3d, self.acc3d_strict, self.acc3d_relax, self.outliers3d]
    }

    /// Elementwise mean; all zeros for an empty slice.
    pub fn mean(items: &[FlowMetrics]) -> FlowMetrics {
        if items.is_empty() {
            return FlowMetrics::default();
        }
        let n = items.len() as f64;
        let avg = |f: fn(&FlowMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        FlowMetrics {
            epe3d: avg(|m| m.epe3d),
            acc3d_strict: avg(|m| m.acc3d_strict),
            acc3d_relax: avg(|m| m.acc3d_relax),
            outliers3d: avg(|m| m.outliers3d),
        }
    }
}

/// Per-point `(epe, relative error)`. A zero ground-truth vector has relative
/// error 0 when matched exactly and infinity otherwise.
pub fn point_errors(pred: &Point, gt: &Point) -> (f64, f64) {
    let epe = (0..3).map(|j| (pred[j] - gt[j]).powi(2)).sum::<f64>().sqrt();
    let norm = gt.iter().map(|v| v * v).sum::<f64>().sqrt();
    let rel = if norm > 0.0 {
        epe / norm
    } else if epe == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    (epe, rel)
}

/// Strict accuracy test for one point.
pub fn strict_accurate(epe: f64, rel: f64) -> bool {
    epe < 0.05 || rel < 0.05
}

pub fn metrics(pred: &FlowField, gt: &FlowField) -> Result<FlowMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::Argument(format!(
            "prediction has {} vectors, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Ok(FlowMetrics::default());
    }
    let mut m = FlowMetrics::default();
    for (p, t) in pred.vectors().iter().zip(gt.vectors()) {
        let (epe, rel) = point_errors(p, t);
        m.epe3d += epe;
        m.acc3d_strict += f64::from(strict_accurate(epe, rel) as u8);
        m.acc3d_relax += f64::from((epe < 0.1 || rel < 0.1) as u8);
        m.outliers3d += f64::from((epe > 0.3 || rel > 0.1) as u8);
    }
    let n = gt.len() as f64;
    m.epe3d /= n;
    m.acc3d_strict /= n;
    m.acc3d_relax /= n;
    m.outliers3d /= n;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one(pred: Point, gt: Point) -> FlowMetrics {
        metrics(&FlowField::new(vec![pred]).unwrap(), &FlowField::new(vec![gt]).unwrap()).unwrap()
    }

    #[test]
    fn examples() {
        let gt = FlowField::new(vec![[0.1, 0.2, 0.0], [0.0; 3]]).unwrap();
        let m = metrics(&gt, &gt).unwrap();
        assert_eq!(m.values(), [0.0, 1.0, 1.0, 0.0]);
        let m = one([10.04, 0., 0.], [10., 0., 0.]);
        assert_eq!(m.acc3d_strict, 1.0);
        // 2% relative error: strict via the relative branch, not an outlier
        let m = one([10.2, 0., 0.], [10., 0., 0.]);
        assert_eq!((m.acc3d_strict, m.outliers3d), (1.0, 0.0));
        assert!((m.epe3d - 0.2).abs() < 1e-12);
    }

    #[test]
    fn zero_ground_truth_convention() {
        assert_eq!(point_errors(&[0.; 3], &[0.; 3]), (0.0, 0.0));
        let (epe, rel) = point_errors(&[0.01, 0., 0.], &[0.; 3]);
        assert_eq!(rel, f64::INFINITY);
        // small absolute error still counts as accurate
        assert!(strict_accurate(epe, rel));
    }

    #[test]
    fn length_mismatch() {
        let a = FlowField::zeros(2);
        let b = FlowField::zeros(3);
        assert!(matches!(metrics(&a, &b), Err(Error::Argument(_))));
    }

    fn vec3() -> impl Strategy<Value = Point> {
        prop::array::uniform3(-1.0f64..1.0)
    }

    proptest! {
        #[test]
        fn strict_never_exceeds_relaxed(
            pairs in prop::collection::vec((vec3(), vec3()), 1..50)
        ) {
            let (p, t): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let m = metrics(&FlowField::new(p).unwrap(), &FlowField::new(t).unwrap()).unwrap();
            prop_assert!(m.acc3d_strict <= m.acc3d_relax);
            for v in m.values()[1..].iter() {
                prop_assert!((0.0..=1.0).contains(v));
            }
        }
    }
}
