use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moments plus the number of steps taken.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(like: &ParamStore<T>) -> Self {
        let zeros = |s: &ParamStore<T>| {
            let mut z = s.clone();
            for (_, t) in z.iter_mut() {
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
            z
        };
        Self {
            step: 0,
            m: zeros(like),
            v: zeros(like),
        }
    }
}

fn same_layout<T: Real>(a: &ParamStore<T>, b: &ParamStore<T>) -> bool {
    a.len() == b.len()
        && a
            .iter()
            .zip(b.iter())
            .all(|((ka, ta), (kb, tb))| ka == kb && ta.shape() == tb.shape())
}

/// One Adam update with bias correction. Weight decay is decoupled:
/// `θ ← θ - lr·wd·θ` precedes the moment update.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut AdamState<T>,
    lr: f64,
    hp: &AdamParams,
) -> Result<()> {
    if !same_layout(params, grads) || !same_layout(params, &state.m) || !same_layout(params, &state.v) {
        return Err(Error::Dimension(
            "parameters, gradients and moments differ in layout".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    let moments = state.m.iter_mut().zip(state.v.iter_mut());
    for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i].as_f64();
            let mut theta = p[i].as_f64();
            theta -= lr * hp.weight_decay * theta;
            let mi = hp.beta1 * m[i].as_f64() + (1.0 - hp.beta1) * gi;
            let vi = hp.beta2 * v[i].as_f64() + (1.0 - hp.beta2) * gi * gi;
            m[i] = T::of(mi);
            v[i] = T::of(vi);
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + hp.eps);
            p[i] = T::of(theta - update);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamSpec;
    use crate::tensor::Tensor;
    use std::collections::BTreeMap;

    fn store(vals: &[(&str, f64)]) -> ParamStore<f64> {
        ParamStore::from_map(
            vals.iter()
                .map(|(k, v)| (k.to_string(), Tensor::scalar(*v)))
                .collect::<BTreeMap<_, _>>(),
        )
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = store(&[("a", 1.5)]);
        let g = store(&[("a", 0.0)]);
        let mut s = AdamState::new(&p);
        let hp = AdamParams {
            weight_decay: 0.0,
            ..AdamParams::default()
        };
        adam_step(&mut p, &g, &mut s, 0.1, &hp).unwrap();
        assert_eq!(p, store(&[("a", 1.5)]));
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [1.0, -3.0, 1e-3] {
            let mut p = store(&[("a", 0.0)]);
            let mut s = AdamState::new(&p);
            adam_step(&mut p, &store(&[("a", g)]), &mut s, 0.1, &AdamParams::default()).unwrap();
            let moved = p.get("a").unwrap().data()[0];
            assert!((moved + 0.1 * g.signum()).abs() < 1e-6, "{g}: {moved}");
        }
    }

    #[test]
    fn groups_do_not_share_moments() {
        let mut p = store(&[("a", 0.0), ("b", 0.0)]);
        let mut s = AdamState::new(&p);
        let hp = AdamParams::default();
        adam_step(&mut p, &store(&[("a", 2.0), ("b", 0.0)]), &mut s, 0.1, &hp).unwrap();
        assert_eq!(s.m.get("b").unwrap().data()[0], 0.0);
        assert_eq!(s.v.get("b").unwrap().data()[0], 0.0);
        assert_eq!(p.get("b").unwrap().data()[0], 0.0);
        assert!(s.m.get("a").unwrap().data()[0] > 0.0);
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let mut p = store(&[("a", 0.0)]);
        let mut s = AdamState::new(&p);
        let g = ParamStore::<f64>::zeros(&[ParamSpec {
            name: "a".into(),
            shape: vec![2],
        }]);
        assert!(adam_step(&mut p, &g, &mut s, 0.1, &AdamParams::default()).is_err());
    }
}
