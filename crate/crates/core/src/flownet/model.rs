use crate::backbone::{backbone_specs, build_pyramid, extract_features, Pyramid};
use crate::cost_volume::{cost_volume, cost_volume_specs};
use crate::deform::{deformation_from_flow, flatten};
use crate::error::{Error, Result};
use crate::geometry::{knn, FlowField, PointCloud};
use crate::nn::{Bound, ParamSpec, ParamStore};
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::wsa::{compute_weights, independent_upsample, wsa_upsample, weight_specs};

use super::config::ModelConfig;
use super::estimator::{estimator_specs, estimator_step, EstimatorInputs};

/// Graph handles produced at one pyramid level.
#[derive(Clone, Debug)]
pub struct LevelState {
    pub level: usize,
    /// `[N_l, 3]` predicted flow.
    pub flow: Var,
    /// `[N_l, C_e]` estimator features.
    pub est_feats: Var,
    /// `[N_l, 3]` source coordinates as a constant.
    pub points: Var,
    /// Coordinates rebuilt from the coarser level; absent at the coarsest
    /// level and when shared aggregation is disabled.
    pub coords_up: Option<Var>,
    pub up_flow: Var,
    pub cost: Var,
    /// Deformation degree of the upsampled flow, fed to the estimator.
    pub dd_input: Option<Var>,
    /// Deformation degree of this level's predicted flow.
    pub dd_pred: Option<Var>,
}

/// One forward pass: both pyramids plus per-level states indexed by level
/// (0 = finest).
pub struct ForwardPass {
    pub source: Pyramid,
    pub target: Pyramid,
    pub levels: Vec<LevelState>,
}

impl ForwardPass {
    pub fn finest(&self) -> &LevelState {
        &self.levels[0]
    }
}

/// Parameter specs of the full network.
pub fn model_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let sizes = cfg.level_sizes()?;
    let ce = cfg.est_width();
    let cost = cfg.cost_config();
    let mut specs = backbone_specs(&cfg.channels);
    for (l, (&n, &c)) in sizes.iter().zip(&cfg.channels).enumerate() {
        specs.extend(cost_volume_specs(&format!("cost.l{l}"), c, &cost));
        let input = c + cfg.cost_channels + cfg.dd_width(n) + ce + 3;
        specs.extend(estimator_specs(
            &format!("est.l{l}"),
            input,
            &cfg.estimator_channels,
            cfg.dense_skips,
        ));
        if l + 1 < sizes.len() {
            if cfg.use_wsa {
                specs.extend(weight_specs(&format!("wsa.l{l}"), ce, cfg.wsa_hidden));
            } else {
                specs.extend(weight_specs(&format!("up_feat.l{l}"), ce, cfg.wsa_hidden));
                specs.extend(weight_specs(&format!("up_flow.l{l}"), ce, cfg.wsa_hidden));
            }
        }
    }
    Ok(specs)
}

/// Network configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowNet<T> {
    config: ModelConfig,
    params: ParamStore<T>,
}

impl<T: Real> FlowNet<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let specs = model_specs(&config)?;
        let mut params = ParamStore::init(&specs, seed)?;
        if config.zero_init_flow_head {
            for (name, t) in params.iter_mut() {
                if name.starts_with("est.") && name.contains(".fc.") {
                    t.data_mut().iter_mut().for_each(|v| *v = T::zero());
                }
            }
        }
        Ok(Self { params, config })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        params.check_specs(&model_specs(&config)?)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> FlowNet<U> {
        FlowNet {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Binds the parameters into `g` and runs the coarse-to-fine pass.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        source: &PointCloud,
        target: &PointCloud,
    ) -> Result<(Bound, ForwardPass)> {
        let bound = self.params.bind(g);
        let pass = forward_with(g, &bound, &self.config, source, target)?;
        Ok((bound, pass))
    }

    /// Finest-level flow without gradient bookkeeping.
    pub fn predict(&self, source: &PointCloud, target: &PointCloud) -> Result<FlowField> {
        let mut g = Graph::new();
        let (_, pass) = self.forward(&mut g, source, target)?;
        FlowField::from_tensor(g.value(pass.finest().flow))
    }
}

/// Forward pass with externally bound parameters.
pub fn forward_with<T: Real>(
    g: &mut Graph<T>,
    params: &Bound,
    cfg: &ModelConfig,
    source: &PointCloud,
    target: &PointCloud,
) -> Result<ForwardPass> {
    if source.len() != cfg.num_points {
        return Err(Error::Config(format!(
            "model expects {} source points, got {}",
            cfg.num_points,
            source.len()
        )));
    }
    let act = cfg.activation();
    let src_pyr = build_pyramid(source, &cfg.ratios, cfg.min_level_points)?;
    let tgt_pyr = build_pyramid(target, &cfg.ratios, cfg.min_level_points)?;
    let fp = extract_features(g, params, &src_pyr, cfg.k_conv, act)?;
    let fq = extract_features(g, params, &tgt_pyr, cfg.k_conv, act)?;
    let depth = src_pyr.depth();
    let ce = cfg.est_width();
    let mut states: Vec<Option<LevelState>> = vec![None; depth];

    for l in (0..depth).rev() {
        let cloud = &src_pyr.level(l).points;
        let n = cloud.len();
        let points = fp.points[l];
        let (coords_up, up_feats, up_flow) = match states.get(l + 1).and_then(|s| s.as_ref()) {
            None => (
                None,
                g.constant(Tensor::zeros(&[n, ce])),
                g.constant(Tensor::zeros(&[n, 3])),
            ),
            Some(coarse) => {
                let coarse_cloud = &src_pyr.level(l + 1).points;
                let table = knn(cloud, coarse_cloud, cfg.k_up.min(coarse_cloud.len()))?;
                let weights = |g: &mut Graph<T>, prefix: String| {
                    compute_weights(
                        g,
                        params,
                        &prefix,
                        points,
                        coarse.points,
                        coarse.est_feats,
                        &table,
                        act,
                    )
                };
                if cfg.use_wsa {
                    let w = weights(g, format!("wsa.l{l}"))?;
                    let up = wsa_upsample(g, &w, coarse.points, coarse.est_feats, coarse.flow)?;
                    (Some(up.coords_up), up.feats_up, up.flow_up)
                } else {
                    let wf = weights(g, format!("up_feat.l{l}"))?;
                    let ws = weights(g, format!("up_flow.l{l}"))?;
                    let (f, s) = independent_upsample(g, &wf, &ws, coarse.est_feats, coarse.flow)?;
                    (None, f, s)
                }
            }
        };

        let warped = g.add(points, up_flow)?;
        let mut cost_cfg = cfg.cost_config();
        cost_cfg.k_target = cost_cfg.k_target.min(tgt_pyr.level(l).points.len());
        let cost = cost_volume(
            g,
            params,
            &format!("cost.l{l}"),
            &cost_cfg,
            warped,
            fp.feats[l],
            fq.points[l],
            fq.feats[l],
        )?
        .values;

        let deform = cfg.deform_config(n);
        let dd_input = if cfg.use_dd {
            Some(deformation_from_flow(g, cloud, points, up_flow, &deform)?)
        } else {
            None
        };
        let dd_flat = match dd_input {
            Some(d) => Some(flatten(g, d)?),
            None => None,
        };
        let inputs = EstimatorInputs {
            point_feats: fp.feats[l],
            cost,
            dd: dd_flat,
            up_feats,
            up_flow,
        };
        let (est_feats, raw_flow) = estimator_step(
            g,
            params,
            &format!("est.l{l}"),
            &inputs,
            cfg.estimator_channels.len(),
            cfg.dense_skips,
            act,
        )?;
        let flow = if cfg.residual_flow {
            g.add(raw_flow, up_flow)?
        } else {
            raw_flow
        };
        let dd_pred = if cfg.use_dd {
            Some(deformation_from_flow(g, cloud, points, flow, &deform)?)
        } else {
            None
        };
        states[l] = Some(LevelState {
            level: l,
            flow,
            est_feats,
            points,
            coords_up,
            up_flow,
            cost,
            dd_input,
            dd_pred,
        });
    }
    Ok(ForwardPass {
        source: src_pyr,
        target: tgt_pyr,
        levels: states.into_iter().map(|s| s.expect("every level visited")).collect(),
    })
}
