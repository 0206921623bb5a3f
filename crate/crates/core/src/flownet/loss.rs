//! Multi-scale training losses. Each term is `Σ_l γ_l Σ_i ‖r_i^l‖₂` for a
//! per-level residual `r`.

use crate::deform::flatten;
use crate::error::{Error, Result};
use crate::geometry::FlowField;
use crate::tensor::{Graph, Real, Tensor, Var};

use super::config::LossWeights;
use super::model::ForwardPass;

fn check_levels(what: &str, levels: usize, gamma: &[f64]) -> Result<()> {
    if levels != gamma.len() {
        return Err(Error::Argument(format!(
            "{what}: {levels} levels but {} level weights",
            gamma.len()
        )));
    }
    Ok(())
}

fn zero<T: Real>(g: &mut Graph<T>) -> Var {
    g.constant(Tensor::scalar(T::zero()))
}

/// `Σ_l γ_l Σ_i ‖rows_l[i]‖₂`, skipping absent levels.
fn weighted_norms<T: Real>(g: &mut Graph<T>, rows: &[Option<Var>], gamma: &[f64]) -> Result<Var> {
    let mut total = zero(g);
    for (r, &w) in rows.iter().zip(gamma) {
        let Some(r) = *r else { continue };
        let norms = g.row_norm(r)?;
        let s = g.sum(norms)?;
        let s = g.scale(s, w)?;
        total = g.add(total, s)?;
    }
    Ok(total)
}

fn residuals<T: Real>(g: &mut Graph<T>, preds: &[Var], truth: &[Var]) -> Result<Vec<Option<Var>>> {
    preds
        .iter()
        .zip(truth)
        .map(|(&p, &t)| g.sub(p, t).map(Some))
        .collect()
}

/// Scene-flow term over per-level predictions and ground truth.
pub fn loss_scene_flow<T: Real>(
    g: &mut Graph<T>,
    flows: &[Var],
    truth: &[Var],
    gamma: &[f64],
) -> Result<Var> {
    if flows.len() != truth.len() {
        return Err(Error::Argument(format!(
            "{} predicted levels against {} ground-truth levels",
            flows.len(),
            truth.len()
        )));
    }
    check_levels("scene flow loss", flows.len(), gamma)?;
    let r = residuals(g, flows, truth)?;
    weighted_norms(g, &r, gamma)
}

/// Coordinate term: aggregated coordinates against the actual fine points.
/// Levels without aggregated coordinates contribute nothing.
pub fn loss_coordinate<T: Real>(
    g: &mut Graph<T>,
    coords_up: &[Option<Var>],
    points: &[Var],
    gamma: &[f64],
) -> Result<Var> {
    if coords_up.len() != points.len() {
        return Err(Error::Argument(format!(
            "{} aggregated levels against {} coordinate levels",
            coords_up.len(),
            points.len()
        )));
    }
    check_levels("coordinate loss", coords_up.len(), gamma)?;
    let mut r = Vec::with_capacity(points.len());
    for (c, &p) in coords_up.iter().zip(points) {
        r.push(match c {
            Some(c) => Some(g.sub(*c, p)?),
            None => None,
        });
    }
    weighted_norms(g, &r, gamma)
}

/// Deformation term over `[N, K, C]` deformation degrees, with the norm
/// taken over each flattened row.
pub fn loss_deformation<T: Real>(g: &mut Graph<T>, dd: &[Var], gamma: &[f64]) -> Result<Var> {
    check_levels("deformation loss", dd.len(), gamma)?;
    let mut rows = Vec::with_capacity(dd.len());
    for &d in dd {
        rows.push(Some(if g.shape(d).len() == 3 { flatten(g, d)? } else { d }));
    }
    weighted_norms(g, &rows, gamma)
}

/// `α_S L_S + α_P L_P + α_DD L_DD`.
pub fn loss_total<T: Real>(
    g: &mut Graph<T>,
    ls: Var,
    lp: Var,
    ldd: Var,
    weights: &LossWeights,
) -> Result<Var> {
    for (name, w) in [
        ("alpha_s", weights.alpha_s),
        ("alpha_p", weights.alpha_p),
        ("alpha_dd", weights.alpha_dd),
    ] {
        if !(w >= 0.0) || !w.is_finite() {
            return Err(Error::Argument(format!("{name} = {w} must be nonnegative")));
        }
    }
    let a = g.scale(ls, weights.alpha_s)?;
    let b = g.scale(lp, weights.alpha_p)?;
    let c = g.scale(ldd, weights.alpha_dd)?;
    let ab = g.add(a, b)?;
    g.add(ab, c)
}

/// Loss terms of one sample. Terms whose module is disabled are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub scene_flow: Var,
    pub coordinate: Option<Var>,
    pub deformation: Option<Var>,
    pub total: Var,
}

/// Ground truth for every level, gathered through the pyramid's sampling
/// indices.
pub fn level_ground_truth(pass: &ForwardPass, gt: &FlowField) -> Result<Vec<FlowField>> {
    if gt.len() != pass.source.level(0).points.len() {
        return Err(Error::Argument(format!(
            "ground truth has {} vectors for {} source points",
            gt.len(),
            pass.source.level(0).points.len()
        )));
    }
    pass.source
        .levels()
        .iter()
        .map(|lv| gt.select(&lv.input_indices))
        .collect()
}

pub fn compute_losses<T: Real>(
    g: &mut Graph<T>,
    pass: &ForwardPass,
    gt: &FlowField,
    weights: &LossWeights,
) -> Result<LossTerms> {
    weights.validate(pass.levels.len())?;
    let truth = level_ground_truth(pass, gt)?
        .iter()
        .map(|f| Ok(g.constant(f.to_tensor()?)))
        .collect::<Result<Vec<_>>>()?;
    let flows: Vec<Var> = pass.levels.iter().map(|s| s.flow).collect();
    let ls = loss_scene_flow(g, &flows, &truth, &weights.gamma)?;

    let coords: Vec<Option<Var>> = pass.levels.iter().map(|s| s.coords_up).collect();
    let lp = if coords.iter().any(Option::is_some) {
        let points: Vec<Var> = pass.levels.iter().map(|s| s.points).collect();
        Some(loss_coordinate(g, &coords, &points, &weights.gamma)?)
    } else {
        None
    };

    let dd: Option<Vec<Var>> = pass.levels.iter().map(|s| s.dd_pred).collect();
    let ldd = match dd {
        Some(dd) => Some(loss_deformation(g, &dd, &weights.gamma)?),
        None => None,
    };

    let zero_p = lp.map_or_else(|| zero(g), |v| v);
    let zero_dd = ldd.map_or_else(|| zero(g), |v| v);
    let total = loss_total(g, ls, zero_p, zero_dd, weights)?;
    Ok(LossTerms {
        scene_flow: ls,
        coordinate: lp,
        deformation: ldd,
        total,
    })
}
