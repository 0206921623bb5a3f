//! The work behind each command-line subcommand. Every function here
//! returns the text to print so the binary stays a thin argument parser.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::binio::write_atomic;
use crate::checks::{self, OpCheck, RigidityReport};
use crate::config::{scenes, RunConfig};
use crate::datagen::{correctness_view, export_ply, read_ply, read_sample, write_sample, SamplePair, SceneConfig};
use crate::error::{Error, Result};
use crate::flownet::{metrics, Checkpoint, FlowMetrics, FlowNet, ModelConfig};
use crate::geometry::{FlowField, PointCloud};
use crate::tensor::GradCheckReport;
use crate::trainer::{
    evaluate, load_dataset, run_ablation, train, zero_flow_baseline, AblationRow, EpochLog, TrainOutput,
    TrainState, Variant,
};

pub const MANIFEST: &str = "manifest.tsv";

pub fn sample_name(i: usize) -> String {
    format!("sample_{i:06}.wsaf")
}

/// Writes `count` scenes with seeds `seed, seed + 1, ..` and a manifest of
/// `file<TAB>seed` rows. Returns the written sample paths.
pub fn generate(scene: &SceneConfig, out_dir: &Path, count: usize, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = String::from("file\tseed\n");
    let mut paths = Vec::with_capacity(count);
    for (i, sample) in scenes(scene, seed, count)?.iter().enumerate() {
        let name = sample_name(i);
        let path = out_dir.join(&name);
        write_sample(sample, &path)?;
        writeln!(manifest, "{name}\t{}", seed.wrapping_add(i as u64)).unwrap();
        paths.push(path);
    }
    write_atomic(&out_dir.join(MANIFEST), manifest.as_bytes())?;
    Ok(paths)
}

pub fn metric_header() -> String {
    FlowMetrics::HEADERS.join(" ")
}

pub fn metric_row(m: &FlowMetrics) -> String {
    m.values().map(|v| format!("{v:.4}")).join(" ")
}

/// Header line, then the mean row unless the dataset is empty.
pub fn metric_table(data: &[SamplePair], m: &FlowMetrics) -> String {
    let mut out = metric_header();
    out.push('\n');
    if !data.is_empty() {
        out.push_str(&metric_row(m));
        out.push('\n');
    }
    out
}

pub fn load_net(ckpt: &Path) -> Result<FlowNet<f32>> {
    let ck = Checkpoint::load(ckpt)?;
    FlowNet::from_params(ck.config, ck.params)
}

pub fn eval(ckpt: &Path, data: &[PathBuf]) -> Result<String> {
    let net = load_net(ckpt)?;
    let samples = load_dataset(data)?;
    let result = evaluate(&net, &samples)?;
    Ok(metric_table(&samples, &result.mean))
}

/// Trains from scratch or from `resume`, writing the log and checkpoints
/// into `out`.
pub fn train_run(cfg: &RunConfig, data: &[PathBuf], out: &Path, resume: Option<&Path>) -> Result<Vec<EpochLog>> {
    let paths = if data.is_empty() { cfg.train.data.clone() } else { data.to_vec() };
    if paths.is_empty() {
        return Err(Error::Config("no training data given".into()));
    }
    let samples = load_dataset(&paths)?;
    let mut state = match resume {
        None => TrainState::new(cfg.model.clone(), cfg.train.seed)?,
        Some(path) => {
            let state = TrainState::from_checkpoint(Checkpoint::load(path)?)?;
            if *state.net.config() != cfg.model {
                return Err(Error::Config(format!(
                    "{} was trained with a different model configuration",
                    path.display()
                )));
            }
            state
        }
    };
    train(
        &mut state,
        &samples,
        &cfg.train,
        &cfg.loss,
        &TrainOutput {
            dir: Some(out.to_path_buf()),
        },
    )
}

/// Reads a cloud from a PLY file or, for anything else, from a WSAF
/// sample (its source or its target).
fn read_cloud(path: &Path, want_target: bool) -> Result<(PointCloud, Option<SamplePair>)> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")) {
        let (points, _) = read_ply(path)?;
        return Ok((PointCloud::new(points)?, None));
    }
    let sample = read_sample(path)?;
    let cloud = if want_target { sample.target.clone() } else { sample.source.clone() };
    Ok((cloud, Some(sample)))
}

pub struct Inference {
    pub flow: FlowField,
    /// Present when the source file carried ground truth.
    pub metrics: Option<FlowMetrics>,
}

/// Predicts the flow from `src` to `tgt`. The flow is written as a WSAF
/// sample whose flow field is the prediction. The colour export needs the
/// ground truth stored in a WSAF source file.
pub fn infer(ckpt: &Path, src: &Path, tgt: &Path, out_flow: Option<&Path>, out_ply: Option<&Path>) -> Result<Inference> {
    let net = load_net(ckpt)?;
    let (source, src_sample) = read_cloud(src, false)?;
    let (target, _) = read_cloud(tgt, true)?;
    let flow = net.predict(&source, &target)?;
    let gt = src_sample.as_ref().map(|s| &s.flow);
    if let Some(path) = out_flow {
        let labels = src_sample.as_ref().map_or_else(|| vec![0; source.len()], |s| s.labels.clone());
        write_sample(&SamplePair::new(source.clone(), target, flow.clone(), labels)?, path)?;
    }
    if let Some(path) = out_ply {
        let gt = gt.ok_or_else(|| {
            Error::Argument("the colour export needs ground truth; pass a WSAF sample as --src".into())
        })?;
        let (points, colors) = correctness_view(&source, &flow, gt)?;
        export_ply(&points, &colors, path)?;
    }
    let metrics = gt.map(|gt| metrics(&flow, gt)).transpose()?;
    Ok(Inference { flow, metrics })
}

pub fn verify_report(r: &RigidityReport) -> String {
    let mut out = format!("trials {}\nmax_residual {:e}\n", r.trials, r.max_residual);
    if let Some(err) = r.max_perturbation_error {
        let verdict = if r.passed() { "matches" } else { "DIFFERS FROM" };
        writeln!(out, "max_deviation_from_expected {err:e} ({verdict} ‖(R - I) e‖)").unwrap();
    }
    writeln!(out, "elapsed_s {:.3}", r.elapsed.as_secs_f64()).unwrap();
    let holds = r.max_residual < checks::RIGIDITY_TOLERANCE;
    writeln!(out, "{}", if holds { "identity holds" } else { "identity violated" }).unwrap();
    out
}

pub struct GradcheckOutcome {
    pub ops: Vec<OpCheck>,
    pub network: GradCheckReport,
}

impl GradcheckOutcome {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(OpCheck::passed) && self.network.max_relative_error < checks::NETWORK_TOLERANCE
    }

    pub fn report(&self) -> String {
        let mut out = String::from("op\tmax_rel_error\tchecked\tskipped_kinks\tresult\n");
        for c in &self.ops {
            writeln!(
                out,
                "{}\t{:.3e}\t{}\t{}\t{}",
                c.name,
                c.max_relative_error,
                c.checked,
                c.skipped_kinks,
                if c.passed() { "ok" } else { "FAIL" }
            )
            .unwrap();
        }
        let n = &self.network;
        writeln!(
            out,
            "network\t{:.3e}\t{}\t{}\t{}",
            n.max_relative_error,
            n.checked,
            n.skipped_kinks,
            if n.max_relative_error < checks::NETWORK_TOLERANCE { "ok" } else { "FAIL" }
        )
        .unwrap();
        out
    }
}

pub fn gradcheck(model: &ModelConfig, trials: usize, seed: u64) -> Result<GradcheckOutcome> {
    Ok(GradcheckOutcome {
        ops: checks::op_gradient_suite(trials, seed)?,
        network: checks::network_gradient_check(model, seed)?,
    })
}

pub struct AblationOutcome {
    pub baseline: FlowMetrics,
    pub rows: Vec<AblationRow>,
}

impl AblationOutcome {
    pub fn table(&self) -> String {
        let mut out = format!("variant {}\n", metric_header());
        for r in &self.rows {
            writeln!(out, "{} {}", r.variant.name(), metric_row(&r.metrics)).unwrap();
        }
        out
    }
}

pub fn ablate(cfg: &RunConfig, log_dir: Option<&Path>) -> Result<AblationOutcome> {
    let train_set = cfg.ablation.train_set(&cfg.scene)?;
    let held_out = cfg.ablation.held_out_set(&cfg.scene)?;
    let baseline = zero_flow_baseline(&held_out)?.mean;
    let rows = run_ablation(
        &Variant::ALL,
        &cfg.model,
        &cfg.train,
        &cfg.loss,
        &train_set,
        &held_out,
        log_dir,
    )?;
    Ok(AblationOutcome { baseline, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_use_four_decimals() {
        let m = FlowMetrics {
            epe3d: 0.0,
            acc3d_strict: 1.0,
            acc3d_relax: 1.0,
            outliers3d: 0.0,
        };
        assert_eq!(metric_row(&m), "0.0000 1.0000 1.0000 0.0000");
        assert_eq!(metric_header(), "EPE3D Acc3DS Acc3DR Outliers3D");
    }

    #[test]
    fn empty_table_is_only_the_header() {
        let m = FlowMetrics::mean(&[]);
        assert_eq!(metric_table(&[], &m), "EPE3D Acc3DS Acc3DR Outliers3D\n");
    }

    #[test]
    fn gen_writes_samples_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let scene = SceneConfig {
            num_points: 64,
            ..SceneConfig::default()
        };
        let paths = generate(&scene, dir.path(), 3, 9).unwrap();
        assert_eq!(paths.len(), 3);
        let manifest = std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert_eq!(manifest.lines().count(), 4);
        assert!(manifest.contains("sample_000002.wsaf\t11"));
        let empty = tempfile::tempdir().unwrap();
        assert!(generate(&scene, empty.path(), 0, 9).unwrap().is_empty());
    }
}
