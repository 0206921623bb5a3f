//! Optimisation loop, evaluation sweeps and the ablation runner.

mod adam;

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::SamplePair;
use crate::error::{Error, Result};
use crate::flownet::{
    compute_losses, metrics, Checkpoint, FlowMetrics, FlowNet, LossWeights, ModelConfig,
    OptimizerState,
};
use crate::geometry::{apply_rigid, FlowField, RigidMotion};
use crate::nn::ParamStore;
use crate::tensor::{Graph, Real};

pub use adam::{adam_step, AdamParams, AdamState};

/// Optimiser and schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Sample files or directories; used by the command line.
    pub data: Vec<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay_rate: f64,
    /// Epochs between decays.
    pub decay_period: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; 0 saves only the last.
    pub checkpoint_interval: usize,
    /// Move every training pair by a random rotation about the vertical
    /// axis and a horizontal shift, drawn per (seed, epoch, sample).
    pub augment: bool,
    /// Largest horizontal shift of an augmented pair.
    pub augment_shift: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: Vec::new(),
            epochs: 200,
            batch_size: 1,
            learning_rate: 1e-3,
            decay_rate: 0.7,
            decay_period: 20,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 1e-4,
            seed: 0,
            checkpoint_interval: 0,
            augment: false,
            augment_shift: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::Config("decay_rate must lie in (0, 1]".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1)")));
            }
        }
        if self.batch_size == 0 || self.decay_period == 0 {
            return Err(Error::Config("batch_size and decay_period must be positive".into()));
        }
        if !(self.augment_shift >= 0.0 && self.augment_shift.is_finite()) {
            return Err(Error::Config("augment_shift must be finite and nonnegative".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config("weight_decay must be nonnegative and eps positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// `base · decay^floor(epoch / period)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.learning_rate * cfg.decay_rate.powi((epoch / cfg.decay_period) as i32)
}

/// Means over one epoch. Terms of disabled modules are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub scene_flow: f64,
    pub coordinate: Option<f64>,
    pub deformation: Option<f64>,
    pub total: f64,
    pub epe3d: f64,
    /// Mean `‖p̂ - p‖` of the aggregated finest-level coordinates.
    pub coord_residual: Option<f64>,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch\tlr\tL_S\tL_P\tL_DD\tL_total\tEPE3D";
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"));
        write!(
            f,
            "{}\t{:.6e}\t{:.6}\t{}\t{}\t{:.6}\t{:.6}",
            self.epoch,
            self.lr,
            self.scene_flow,
            opt(self.coordinate),
            opt(self.deformation),
            self.total,
            self.epe3d
        )
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub net: FlowNet<f32>,
    pub adam: AdamState<f32>,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let net = FlowNet::new(config, seed)?;
        Ok(Self {
            adam: AdamState::new(net.params()),
            net,
            epoch: 0,
        })
    }

    pub fn to_checkpoint(&self, meta: String) -> Checkpoint {
        Checkpoint {
            config: self.net.config().clone(),
            meta,
            params: self.net.params().clone(),
            optimizer: Some(OptimizerState {
                step: self.adam.step,
                epoch: self.epoch as u64,
                m: self.adam.m.clone(),
                v: self.adam.v.clone(),
            }),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let net = FlowNet::from_params(ck.config, ck.params)?;
        let (adam, epoch) = match ck.optimizer {
            Some(o) => (
                AdamState {
                    step: o.step,
                    m: o.m,
                    v: o.v,
                },
                o.epoch as usize,
            ),
            None => (AdamState::new(net.params()), 0),
        };
        Ok(Self { net, adam, epoch })
    }
}

/// Where and how often to write checkpoints and the log.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
}

impl TrainOutput {
    pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
        dir.join(format!("epoch_{epoch:04}.ckpt"))
    }

    pub fn last_path(dir: &Path) -> PathBuf {
        dir.join("last.ckpt")
    }

    pub fn log_path(dir: &Path) -> PathBuf {
        dir.join("train.log")
    }
}

fn add_into<T: Real>(acc: &mut ParamStore<T>, g: &ParamStore<T>) {
    for ((_, a), (_, b)) in acc.iter_mut().zip(g.iter()) {
        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
            *x += *y;
        }
    }
}

fn scale_store<T: Real>(s: &mut ParamStore<T>, f: f64) {
    for (_, t) in s.iter_mut() {
        for x in t.data_mut() {
            *x = T::of(x.as_f64() * f);
        }
    }
}

/// Per-sample quantities of one training step.
struct StepRecord {
    scene_flow: f64,
    coordinate: Option<f64>,
    deformation: Option<f64>,
    total: f64,
    epe3d: f64,
    coord_residual: Option<f64>,
}

fn mean_residual(g: &Graph<f32>, coords: crate::tensor::Var, points: crate::tensor::Var) -> f64 {
    let a = g.value(coords).data();
    let b = g.value(points).data();
    let n = a.len() / 3;
    (0..n)
        .map(|i| {
            (0..3)
                .map(|j| (a[3 * i + j] as f64 - b[3 * i + j] as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / n.max(1) as f64
}

fn sample_gradients(
    net: &FlowNet<f32>,
    sample: &SamplePair,
    weights: &LossWeights,
) -> Result<(ParamStore<f32>, StepRecord)> {
    let mut g = Graph::<f32>::new();
    let (bound, pass) = net.forward(&mut g, &sample.source, &sample.target)?;
    let terms = compute_losses(&mut g, &pass, &sample.flow, weights)?;
    g.backward(terms.total)?;
    let scalar = |v| g.value(v).data()[0] as f64;
    let pred = FlowField::from_tensor(g.value(pass.finest().flow))?;
    let fin = pass.finest();
    let record = StepRecord {
        scene_flow: scalar(terms.scene_flow),
        coordinate: terms.coordinate.map(scalar),
        deformation: terms.deformation.map(scalar),
        total: scalar(terms.total),
        epe3d: metrics(&pred, &sample.flow)?.epe3d,
        coord_residual: fin.coords_up.map(|c| mean_residual(&g, c, fin.points)),
    };
    if !record.total.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    Ok((bound.grads(&g), record))
}

fn mean_opt(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = xs.collect();
    v.filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Sample order of an epoch; depends only on the seed and the epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// The augmentation applied to sample `index` in `epoch`: a yaw rotation
/// and a shift in the ground plane. Flow vectors only rotate.
pub fn augment_pair(sample: &SamplePair, seed: u64, epoch: usize, index: usize, shift: f64) -> Result<SamplePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed ^ (epoch as u64).wrapping_mul(0xD1B5_4A32_D192_ED03) ^ (index as u64).wrapping_mul(0x8CB9_2BA7_2F3D_8DD7),
    );
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let mut t = [0.0; 3];
    if shift > 0.0 {
        t[0] = rng.random_range(-shift..=shift);
        t[2] = rng.random_range(-shift..=shift);
    }
    let motion = RigidMotion::from_axis_angle([0.0, 1.0, 0.0], angle, t)?;
    let turn = RigidMotion::from_axis_angle([0.0, 1.0, 0.0], angle, [0.0; 3])?;
    SamplePair::new(
        apply_rigid(&sample.source, &motion),
        apply_rigid(&sample.target, &motion),
        FlowField::new(sample.flow.vectors().iter().map(|v| turn.apply(v)).collect())?,
        sample.labels.clone(),
    )
}

/// Runs one epoch (0-based `epoch`) over `data` and updates `state`.
pub fn train_epoch(
    state: &mut TrainState,
    data: &[SamplePair],
    cfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<EpochLog> {
    let epoch = state.epoch;
    let lr = lr_at(epoch, cfg);
    let order = epoch_order(cfg.seed, epoch, data.len());
    let mut records = Vec::with_capacity(data.len());
    for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
        let mut acc: Option<ParamStore<f32>> = None;
        for &i in batch {
            let augmented;
            let sample = if cfg.augment {
                augmented = augment_pair(&data[i], cfg.seed, epoch, i, cfg.augment_shift)?;
                &augmented
            } else {
                &data[i]
            };
            let (grads, rec) = sample_gradients(&state.net, sample, weights).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!(
                    "{what} in epoch {}, batch {b} (sample {i})",
                    epoch + 1
                )),
                other => other,
            })?;
            match acc.as_mut() {
                None => acc = Some(grads),
                Some(a) => add_into(a, &grads),
            }
            records.push(rec);
        }
        let mut grads = acc.expect("batches are nonempty");
        scale_store(&mut grads, 1.0 / batch.len() as f64);
        adam_step(state.net.params_mut(), &grads, &mut state.adam, lr, &cfg.adam())?;
    }
    state.epoch += 1;
    let n = records.len().max(1) as f64;
    let mean = |f: fn(&StepRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    Ok(EpochLog {
        epoch: state.epoch,
        lr,
        scene_flow: mean(|r| r.scene_flow),
        coordinate: mean_opt(records.iter().map(|r| r.coordinate)),
        deformation: mean_opt(records.iter().map(|r| r.deformation)),
        total: mean(|r| r.total),
        epe3d: mean(|r| r.epe3d),
        coord_residual: mean_opt(records.iter().map(|r| r.coord_residual)),
    })
}

fn check_dataset(data: &[SamplePair], model: &ModelConfig) -> Result<()> {
    if let Some((i, s)) = data
        .iter()
        .enumerate()
        .find(|(_, s)| s.source.len() != model.num_points)
    {
        return Err(Error::Config(format!(
            "sample {i} has {} source points, model expects {}",
            s.source.len(),
            model.num_points
        )));
    }
    Ok(())
}

/// Trains `state` until `cfg.epochs` epochs are complete. Resuming from a
/// checkpointed state continues exactly where the original run stood.
pub fn train(
    state: &mut TrainState,
    data: &[SamplePair],
    cfg: &TrainConfig,
    weights: &LossWeights,
    out: &TrainOutput,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    weights.validate(state.net.config().depth())?;
    check_dataset(data, state.net.config())?;
    if data.is_empty() && state.epoch < cfg.epochs {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    let meta = toml::to_string(cfg).unwrap_or_default();
    let mut logs = Vec::new();
    if let Some(dir) = &out.dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    while state.epoch < cfg.epochs {
        let entry = train_epoch(state, data, cfg, weights)?;
        log::info!("{entry}");
        logs.push(entry);
        if let Some(dir) = &out.dir {
            let mut text = String::new();
            let log_path = TrainOutput::log_path(dir);
            if let Ok(prev) = std::fs::read_to_string(&log_path) {
                text = prev;
            }
            if text.is_empty() {
                text.push_str(EpochLog::HEADER);
                text.push('\n');
            }
            text.push_str(&format!("{}\n", logs.last().unwrap()));
            crate::binio::write_atomic(&log_path, text.as_bytes())?;
            let due = cfg.checkpoint_interval > 0 && state.epoch % cfg.checkpoint_interval == 0;
            if due || state.epoch == cfg.epochs {
                let ck = state.to_checkpoint(meta.clone());
                if due {
                    ck.save(&TrainOutput::checkpoint_path(dir, state.epoch))?;
                }
                ck.save(&TrainOutput::last_path(dir))?;
            }
        }
    }
    Ok(logs)
}

/// Aggregate and per-sample metrics at the finest level.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub mean: FlowMetrics,
    pub per_sample: Vec<FlowMetrics>,
}

pub fn evaluate<T: Real>(net: &FlowNet<T>, data: &[SamplePair]) -> Result<Evaluation> {
    let per_sample = data
        .iter()
        .map(|s| metrics(&net.predict(&s.source, &s.target)?, &s.flow))
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        mean: FlowMetrics::mean(&per_sample),
        per_sample,
    })
}

/// Metrics of predicting zero flow everywhere.
pub fn zero_flow_baseline(data: &[SamplePair]) -> Result<Evaluation> {
    let per_sample = data
        .iter()
        .map(|s| metrics(&FlowField::zeros(s.flow.len()), &s.flow))
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        mean: FlowMetrics::mean(&per_sample),
        per_sample,
    })
}

/// One row of the module ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub use_dd: bool,
    pub use_wsa: bool,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant { use_dd: false, use_wsa: false },
        Variant { use_dd: true, use_wsa: false },
        Variant { use_dd: false, use_wsa: true },
        Variant { use_dd: true, use_wsa: true },
    ];

    pub fn name(&self) -> &'static str {
        match (self.use_dd, self.use_wsa) {
            (false, false) => "MN",
            (true, false) => "MN+DD",
            (false, true) => "MN+WSA",
            (true, true) => "MN+DD+WSA",
        }
    }

    /// File-name friendly form of [`Variant::name`].
    pub fn slug(&self) -> String {
        self.name().to_lowercase().replace('+', "_")
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            use_dd: self.use_dd,
            use_wsa: self.use_wsa,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub metrics: FlowMetrics,
    pub log: Vec<EpochLog>,
}

/// Trains every variant from the same seed and budget and evaluates it on
/// `held_out`. With a `log_dir`, each variant logs and checkpoints into
/// its own subdirectory named by [`Variant::slug`].
pub fn run_ablation(
    variants: &[Variant],
    model: &ModelConfig,
    cfg: &TrainConfig,
    weights: &LossWeights,
    train_data: &[SamplePair],
    held_out: &[SamplePair],
    log_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|v| {
            let mut state = TrainState::new(v.apply(model), cfg.seed)?;
            let out = TrainOutput {
                dir: log_dir.map(|d| d.join(v.slug())),
            };
            log::info!("training {}", v.name());
            let log = train(&mut state, train_data, cfg, weights, &out)?;
            let metrics = evaluate(&state.net, held_out)?.mean;
            Ok(AblationRow {
                variant: *v,
                metrics,
                log,
            })
        })
        .collect()
}

/// Sample files named by `paths`; directories contribute their `*.wsaf`
/// files in name order.
pub fn dataset_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut inside: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "wsaf"))
                .collect();
            inside.sort();
            files.extend(inside);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

pub fn load_dataset(paths: &[PathBuf]) -> Result<Vec<SamplePair>> {
    dataset_files(paths)?
        .iter()
        .map(|f| crate::datagen::read_sample(f))
        .collect()
}
