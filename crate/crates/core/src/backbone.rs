//! Five-level point pyramid and set-conv feature extraction.

use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, knn, PointCloud};
use crate::nn::{mlp, mlp_specs, Bound, ParamSpec};
use crate::tensor::{Activation, Graph, IndexTable, Real, Reduction, Var};

/// One level of a pyramid built by repeated farthest point sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevel {
    pub level: usize,
    pub points: PointCloud,
    /// Indices into level `level - 1` chosen by FPS; `None` at level 0.
    pub down_indices: Option<Vec<usize>>,
    /// Indices into the input cloud (level 0) of every point of this level.
    pub input_indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    levels: Vec<PyramidLevel>,
}

impl Pyramid {
    pub fn levels(&self) -> &[PyramidLevel] {
        &self.levels
    }

    pub fn level(&self, l: usize) -> &PyramidLevel {
        &self.levels[l]
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.points.len()).collect()
    }
}

/// `round(n * ratio)` per level after validating the schedule.
pub fn level_sizes(n: usize, ratios: &[f64]) -> Result<Vec<usize>> {
    if ratios.first() != Some(&1.0) {
        return Err(Error::Config(format!(
            "pyramid ratios must start at 1, got {ratios:?}"
        )));
    }
    if ratios.windows(2).any(|w| !(w[1] < w[0]) || !(w[1] > 0.0)) {
        return Err(Error::Config(format!(
            "pyramid ratios must be strictly decreasing and positive, got {ratios:?}"
        )));
    }
    let sizes: Vec<usize> = ratios.iter().map(|r| (n as f64 * r).round() as usize).collect();
    if sizes.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config(format!(
            "{n} points give non-decreasing level sizes {sizes:?}"
        )));
    }
    Ok(sizes)
}

/// Builds the pyramid; every level must keep at least `min_points` points.
pub fn build_pyramid(cloud: &PointCloud, ratios: &[f64], min_points: usize) -> Result<Pyramid> {
    let sizes = level_sizes(cloud.len(), ratios)?;
    if let Some(&last) = sizes.last() {
        if last < min_points.max(1) {
            return Err(Error::Config(format!(
                "coarsest level holds {last} points, consumers need {min_points}"
            )));
        }
    }
    let mut levels = vec![PyramidLevel {
        level: 0,
        points: cloud.clone(),
        down_indices: None,
        input_indices: (0..cloud.len()).collect(),
    }];
    for (l, &m) in sizes.iter().enumerate().skip(1) {
        let parent = &levels[l - 1];
        let picks = farthest_point_sample(&parent.points, m, 0)?;
        let points = parent.points.select(&picks)?;
        let input_indices = picks.iter().map(|&i| parent.input_indices[i]).collect();
        levels.push(PyramidLevel {
            level: l,
            points,
            down_indices: Some(picks),
            input_indices,
        });
    }
    Ok(Pyramid { levels })
}

/// Set-conv parameters: a two-layer MLP on `[offset, feature]`.
pub fn set_conv_specs(prefix: &str, cin: usize, cout: usize) -> Vec<ParamSpec> {
    mlp_specs(prefix, &[3 + cin, cout, cout])
}

/// For each child point: gather its parent neighbours, apply the shared MLP
/// to `[p_k - p_i, f(p_k)]` and max-pool over the neighbourhood.
#[allow(clippy::too_many_arguments)]
pub fn set_conv<T: Real>(
    g: &mut Graph<T>,
    params: &Bound,
    prefix: &str,
    parent_points: Var,
    parent_feats: Var,
    child_points: Var,
    table: &IndexTable,
    act: Activation,
) -> Result<Var> {
    let n_child = g.shape(child_points)[0];
    if table.rows() != n_child {
        return Err(Error::Dimension(format!(
            "neighbour table has {} rows for {n_child} child points",
            table.rows()
        )));
    }
    if table.cols() > g.shape(parent_points)[0] {
        return Err(Error::Config(format!(
            "set_conv K = {} exceeds {} parent points",
            table.cols(),
            g.shape(parent_points)[0]
        )));
    }
    let nb = g.gather(parent_points, table)?;
    let center = g.gather(child_points, &IndexTable::repeat_self(n_child, table.cols()))?;
    let rel = g.sub(nb, center)?;
    let feats = g.gather(parent_feats, table)?;
    let x = g.concat(&[rel, feats])?;
    let h = mlp(g, params, prefix, x, 2, act, true)?;
    g.reduce(h, Reduction::Max)
}

/// Parameter specs of the feature extractor for the given channel schedule.
/// Level 0 consumes the raw coordinates as its input feature.
pub fn backbone_specs(channels: &[usize]) -> Vec<ParamSpec> {
    let mut cin = 3;
    let mut specs = Vec::new();
    for (l, &c) in channels.iter().enumerate() {
        specs.extend(set_conv_specs(&format!("backbone.l{l}"), cin, c));
        cin = c;
    }
    specs
}

/// Per-level point constants and features of one cloud.
pub struct LevelFeatures {
    pub points: Vec<Var>,
    pub feats: Vec<Var>,
}

/// Runs the set-conv stack over a pyramid. `k_conv` is capped by each
/// parent level's size.
pub fn extract_features<T: Real>(
    g: &mut Graph<T>,
    params: &Bound,
    pyramid: &Pyramid,
    k_conv: usize,
    act: Activation,
) -> Result<LevelFeatures> {
    let mut points = Vec::with_capacity(pyramid.depth());
    let mut feats: Vec<Var> = Vec::with_capacity(pyramid.depth());
    for (l, level) in pyramid.levels().iter().enumerate() {
        let pts = g.constant(level.points.to_tensor());
        let (parent_cloud, parent_pts, parent_feats) = if l == 0 {
            (&level.points, pts, pts)
        } else {
            (&pyramid.level(l - 1).points, points[l - 1], feats[l - 1])
        };
        let k = k_conv.min(parent_cloud.len());
        let table = knn(&level.points, parent_cloud, k)?;
        let f = set_conv(
            g,
            params,
            &format!("backbone.l{l}"),
            parent_pts,
            parent_feats,
            pts,
            table.indices(),
            act,
        )?;
        points.push(pts);
        feats.push(f);
    }
    Ok(LevelFeatures { points, feats })
}
