use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Worst `|a - n| / max(|a|, |n|, 1e-8)` over the checked coordinates.
    pub max_relative_error: f64,
    pub checked: usize,
    /// Coordinates whose `±eps` probes landed on different sides of a kink.
    pub skipped_kinks: usize,
    /// `(input, element, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Contract("grad_check needs a scalar function".into()));
    }
    Ok((g.value(out).data()[0], g.kink_signature()))
}

/// Checks every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |e| (i, e)))
        .collect();
    grad_check_coords(f, inputs, eps, &coords)
}

/// Checks only the listed `(input, element)` coordinates.
///
/// A coordinate whose `+eps` and `-eps` evaluations take a different
/// piecewise branch than the base point (see [`Graph::kink_signature`])
/// straddles a kink and is skipped rather than scored.
pub fn grad_check_coords<F>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("eps must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let base_signature = g.kink_signature();
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(g);

    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for &(i, e) in coords {
        let orig = inputs[i].data()[e];
        probe[i].data_mut()[e] = orig + eps;
        let (plus, sig_plus) = evaluate(&f, &probe)?;
        probe[i].data_mut()[e] = orig - eps;
        let (minus, sig_minus) = evaluate(&f, &probe)?;
        probe[i].data_mut()[e] = orig;
        if sig_plus != base_signature || sig_minus != base_signature {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i].data()[e];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        report.checked += 1;
        if report.worst.is_none() || rel > report.max_relative_error {
            report.max_relative_error = rel;
            report.worst = Some((i, e, a, numeric));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Activation;

    #[test]
    fn linear_layer_passes() {
        let x = Tensor::new(vec![3, 2], vec![0.3, -0.7, 1.1, 0.2, -0.5, 0.9]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![0.4, -1.3, 0.8, 0.6]).unwrap();
        let b = Tensor::new(vec![2], vec![0.1, -0.2]).unwrap();
        let weights = Tensor::new(vec![3, 2], vec![1.0, -2.0, 0.5, 0.3, -0.7, 1.9]).unwrap();
        let report = grad_check(
            |g, v| {
                let y = g.linear(v[0], v[1], v[2])?;
                let m = g.mul(y, v[3])?;
                g.sum(m)
            },
            &[x, w, b, weights],
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-6, "{report:?}");
        assert_eq!(report.checked, 6 + 4 + 2 + 6);
    }

    #[test]
    fn relu_away_from_kink_passes() {
        let x = Tensor::new(vec![4], vec![-0.5, 0.3, 1.2, -2.0]).unwrap();
        let c = Tensor::new(vec![4], vec![0.7, -1.1, 0.4, 2.0]).unwrap();
        let report = grad_check(
            |g, v| {
                let y = g.activation(v[0], Activation::Relu)?;
                let m = g.mul(y, v[1])?;
                g.sum(m)
            },
            &[x, c],
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-6, "{report:?}");
        assert_eq!(report.skipped_kinks, 0);
    }

    #[test]
    fn kink_straddle_is_skipped() {
        let x = Tensor::new(vec![1], vec![1e-7]).unwrap();
        let report = grad_check(
            |g, v| {
                let y = g.relu(v[0])?;
                g.sum(y)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(report.skipped_kinks, 1);
        assert_eq!(report.checked, 0);
    }

    #[test]
    fn rejects_bad_eps_and_non_scalar() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            grad_check(|g, v| g.sum(v[0]), &[x.clone()], 0.0),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            grad_check(|_, v| Ok(v[0]), &[x], 1e-5),
            Err(Error::Contract(_))
        ));
    }
}
