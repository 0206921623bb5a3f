//! Per-level scene flow estimator: a dense MLP block over the concatenated
//! inputs followed by a fully connected flow head.

use crate::error::{Error, Result};
use crate::nn::{linear, linear_specs, Bound, ParamSpec};
use crate::tensor::{Activation, Graph, Real, Var};

/// Input widths of each block layer. With dense skips every layer sees the
/// block input plus all previous layer outputs.
pub fn layer_inputs(input: usize, widths: &[usize], dense: bool) -> Vec<usize> {
    let mut ins = Vec::with_capacity(widths.len());
    let mut seen = input;
    for (j, &w) in widths.iter().enumerate() {
        ins.push(if dense || j == 0 { seen } else { widths[j - 1] });
        seen += w;
    }
    ins
}

pub fn estimator_specs(prefix: &str, input: usize, widths: &[usize], dense: bool) -> Vec<ParamSpec> {
    let mut specs: Vec<ParamSpec> = layer_inputs(input, widths, dense)
        .into_iter()
        .zip(widths)
        .enumerate()
        .flat_map(|(j, (cin, &cout))| linear_specs(&format!("{prefix}.{j}"), cin, cout))
        .collect();
    specs.extend(linear_specs(&format!("{prefix}.fc"), *widths.last().unwrap(), 3));
    specs
}

/// The five estimator inputs of one level.
pub struct EstimatorInputs {
    pub point_feats: Var,
    pub cost: Var,
    /// Flattened deformation degree, absent when the module is disabled.
    pub dd: Option<Var>,
    pub up_feats: Var,
    pub up_flow: Var,
}

/// Returns `(f_e, s)`: the block output and the `[N, 3]` flow.
pub fn estimator_step<T: Real>(
    g: &mut Graph<T>,
    params: &Bound,
    prefix: &str,
    inputs: &EstimatorInputs,
    layers: usize,
    dense: bool,
    act: Activation,
) -> Result<(Var, Var)> {
    let mut parts = vec![inputs.point_feats, inputs.cost];
    parts.extend(inputs.dd);
    parts.extend([inputs.up_feats, inputs.up_flow]);
    let x = g.concat(&parts)?;
    let expected = g.shape(params.var(&format!("{prefix}.0.w"))?)[0];
    if g.shape(x)[1] != expected {
        return Err(Error::Config(format!(
            "estimator {prefix} expects {expected} input channels, got {}",
            g.shape(x)[1]
        )));
    }
    let mut seen = vec![x];
    let mut h = x;
    for j in 0..layers {
        let input = if dense && j > 0 { g.concat(&seen)? } else { h };
        let z = linear(g, params, &format!("{prefix}.{j}"), input)?;
        h = g.activation(z, act)?;
        seen.push(h);
    }
    let flow = linear(g, params, &format!("{prefix}.fc"), h)?;
    Ok((h, flow))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::Tensor;

    #[test]
    fn dense_growth_in_parameter_count() {
        // input 10, widths (4, 3, 2):
        // dense  : 10*4 + 14*3 + 17*2 = 116 weights
        // plain  : 10*4 +  4*3 +  3*2 =  58 weights
        let count = |dense| -> usize {
            estimator_specs("e", 10, &[4, 3, 2], dense)
                .iter()
                .filter(|s| s.name.ends_with(".w") && !s.name.contains("fc"))
                .map(|s| s.shape.iter().product::<usize>())
                .sum()
        };
        assert_eq!(count(true), 116);
        assert_eq!(count(false), 58);
        assert_eq!(layer_inputs(10, &[4, 3, 2], true), vec![10, 14, 17]);
    }

    fn run(store: &ParamStore<f64>, dense: bool) -> (Tensor<f64>, Tensor<f64>) {
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let mk = |g: &mut Graph<f64>, c: usize, v: f64| g.constant(Tensor::full(&[5, c], v));
        let inputs = EstimatorInputs {
            point_feats: mk(&mut g, 2, 0.5),
            cost: mk(&mut g, 3, -0.2),
            dd: Some(mk(&mut g, 2, 0.1)),
            up_feats: mk(&mut g, 2, 0.0),
            up_flow: mk(&mut g, 3, 0.0),
        };
        let (fe, s) = estimator_step(&mut g, &b, "e", &inputs, 3, dense, Activation::Relu).unwrap();
        (g.value(fe).clone(), g.value(s).clone())
    }

    #[test]
    fn zero_params_give_zero_flow() {
        let store = ParamStore::<f64>::zeros(&estimator_specs("e", 12, &[4, 3, 2], true));
        let (fe, s) = run(&store, true);
        assert_eq!(s.shape(), &[5, 3]);
        assert_eq!(fe.shape(), &[5, 2]);
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn width_mismatch_is_a_configuration_error() {
        let store = ParamStore::<f64>::zeros(&estimator_specs("e", 11, &[4, 3, 2], false));
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let z = g.constant(Tensor::zeros(&[5, 3]));
        let inputs = EstimatorInputs {
            point_feats: z,
            cost: z,
            dd: None,
            up_feats: z,
            up_flow: z,
        };
        assert!(matches!(
            estimator_step(&mut g, &b, "e", &inputs, 3, false, Activation::Relu),
            Err(Error::Config(_))
        ));
    }
}
