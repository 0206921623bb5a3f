//! End-to-end runs of the command-line binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use wsaflow::datagen::{generate_scene, write_sample, SamplePair, SceneConfig};
use wsaflow::flownet::{model_specs, Checkpoint, ModelConfig};
use wsaflow::geometry::FlowField;
use wsaflow::nn::ParamStore;

const TINY: &str = r#"
[scene]
num_points = 32
num_objects = 2

[model]
num_points = 32
ratios = [1.0, 0.25]
channels = [6, 8]
k_conv = 4
k_cost = 4
k_dilated = 2
cost_channels = 5
k_up = 4
wsa_hidden = 4
k_dd = 4
estimator_channels = [6, 5, 4]

[loss]
gamma = [0.02, 0.04]

[train]
epochs = 2

[ablation]
train_count = 3
held_out_count = 2
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wsaflow"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let w = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(w.path("tiny.toml"), TINY).unwrap();
        w
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn gen(&self, out: &str, count: usize, seed: u64) -> Output {
        run(&[
            "gen",
            "--config",
            s(&self.path("tiny.toml")),
            "--out-dir",
            s(&self.path(out)),
            "--count",
            &count.to_string(),
            "--seed",
            &seed.to_string(),
        ])
    }
}

fn tiny_model() -> ModelConfig {
    ModelConfig::tiny()
}

#[test]
fn gen_writes_numbered_samples_and_manifest() {
    let w = Workspace::new();
    let o = w.gen("a", 3, 7);
    assert!(o.status.success(), "{}", stderr(&o));
    for i in 0..3 {
        assert!(w.path(&format!("a/sample_{i:06}.wsaf")).is_file());
    }
    let manifest = std::fs::read_to_string(w.path("a/manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 3);

    assert!(w.gen("b", 3, 7).status.success());
    for i in 0..3 {
        let name = format!("sample_{i:06}.wsaf");
        assert_eq!(
            std::fs::read(w.path(&format!("a/{name}"))).unwrap(),
            std::fs::read(w.path(&format!("b/{name}"))).unwrap()
        );
    }

    let o = w.gen("empty", 0, 7);
    assert!(o.status.success());
    let manifest = std::fs::read_to_string(w.path("empty/manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 1);
}

#[test]
fn bad_config_keys_fail_without_output() {
    let w = Workspace::new();
    std::fs::write(w.path("bad.toml"), "[scene]\nnum_point = 32\n").unwrap();
    let o = run(&["gen", "--config", s(&w.path("bad.toml")), "--out-dir", s(&w.path("out")), "--count", "2"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("num_point"), "{}", stderr(&o));
    assert!(!w.path("out").exists());
}

#[test]
fn unwritable_output_fails_cleanly() {
    let w = Workspace::new();
    std::fs::write(w.path("blocker"), "a file, not a directory").unwrap();
    let o = w.gen("blocker", 1, 0);
    assert!(!o.status.success());
    assert_eq!(std::fs::read_to_string(w.path("blocker")).unwrap(), "a file, not a directory");
}

#[test]
fn train_eval_infer_and_resume() {
    let w = Workspace::new();
    assert!(w.gen("data", 3, 1).status.success());
    let cfg = w.path("tiny.toml");
    let o = run(&["train", "--config", s(&cfg), "--data", s(&w.path("data")), "--out", s(&w.path("run"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(w.path("run/train.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch\tlr\tL_S\tL_P\tL_DD\tL_total\tEPE3D");
    assert_eq!(lines.len(), 3);
    assert!(lines[1..].iter().all(|l| l.split('\t').count() == 7));

    // four epochs straight versus two plus a resumed two
    std::fs::write(w.path("four.toml"), TINY.replace("epochs = 2", "epochs = 4")).unwrap();
    let four = w.path("four.toml");
    let o = run(&["train", "--config", s(&four), "--data", s(&w.path("data")), "--out", s(&w.path("straight"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&[
        "train",
        "--config",
        s(&four),
        "--data",
        s(&w.path("data")),
        "--out",
        s(&w.path("resumed")),
        "--resume",
        s(&w.path("run/last.ckpt")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = Checkpoint::load(&w.path("straight/last.ckpt")).unwrap();
    let b = Checkpoint::load(&w.path("resumed/last.ckpt")).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.optimizer, b.optimizer);
    let straight_log = std::fs::read_to_string(w.path("straight/train.log")).unwrap();
    let resumed_log = std::fs::read_to_string(w.path("resumed/train.log")).unwrap();
    assert_eq!(straight_log.lines().skip(3).collect::<Vec<_>>(), resumed_log.lines().skip(1).collect::<Vec<_>>());

    let ckpt = w.path("straight/last.ckpt");
    let sample = w.path("data/sample_000000.wsaf");
    let o = run(&["eval", "--ckpt", s(&ckpt), "--data", s(&sample)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let eval_out = stdout(&o);
    let o = run(&[
        "infer",
        "--ckpt",
        s(&ckpt),
        "--src",
        s(&sample),
        "--tgt",
        s(&sample),
        "--out-flow",
        s(&w.path("flow.wsaf")),
        "--out-ply",
        s(&w.path("view.ply")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), eval_out);
    let flow = wsaflow::datagen::read_sample(&w.path("flow.wsaf")).unwrap();
    let truth = wsaflow::datagen::read_sample(&sample).unwrap();
    let m = wsaflow::flownet::metrics(&flow.flow, &truth.flow).unwrap();
    assert!(eval_out.ends_with(&format!("{}\n", wsaflow::commands::metric_row(&m))));
    let (points, _) = wsaflow::datagen::read_ply(&w.path("view.ply")).unwrap();
    assert_eq!(points.len(), 2 * 32);

    // a model trained for another configuration is refused on resume
    std::fs::write(w.path("other.toml"), TINY.replace("wsa_hidden = 4", "wsa_hidden = 3")).unwrap();
    let o = run(&[
        "train",
        "--config",
        s(&w.path("other.toml")),
        "--data",
        s(&w.path("data")),
        "--out",
        s(&w.path("other")),
        "--resume",
        s(&ckpt),
    ]);
    assert!(!o.status.success());
}

fn zero_model_checkpoint(path: &Path) {
    let cfg = tiny_model();
    let params = ParamStore::<f32>::zeros(&model_specs(&cfg).unwrap());
    Checkpoint {
        config: cfg,
        meta: String::new(),
        params,
        optimizer: None,
    }
    .save(path)
    .unwrap();
}

#[test]
fn eval_of_exact_prediction_prints_the_ideal_row() {
    let w = Workspace::new();
    zero_model_checkpoint(&w.path("zero.ckpt"));
    let scene = generate_scene(&SceneConfig {
        num_points: 32,
        num_objects: 2,
        ..SceneConfig::default()
    })
    .unwrap();
    let still = SamplePair::new(scene.source.clone(), scene.source.clone(), FlowField::zeros(32), scene.labels).unwrap();
    std::fs::create_dir(w.path("still")).unwrap();
    write_sample(&still, &w.path("still/a.wsaf")).unwrap();
    let o = run(&["eval", "--ckpt", s(&w.path("zero.ckpt")), "--data", s(&w.path("still"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), "EPE3D Acc3DS Acc3DR Outliers3D\n0.0000 1.0000 1.0000 0.0000\n");

    std::fs::create_dir(w.path("nothing")).unwrap();
    let o = run(&["eval", "--ckpt", s(&w.path("zero.ckpt")), "--data", s(&w.path("nothing"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), "EPE3D Acc3DS Acc3DR Outliers3D\n");
}

#[test]
fn missing_or_corrupt_checkpoints_are_errors() {
    let w = Workspace::new();
    assert!(w.gen("data", 1, 0).status.success());
    let o = run(&["eval", "--data", s(&w.path("data"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));

    zero_model_checkpoint(&w.path("good.ckpt"));
    let mut bytes = std::fs::read(w.path("good.ckpt")).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(w.path("bad.ckpt"), &bytes).unwrap();
    let o = run(&["eval", "--ckpt", s(&w.path("bad.ckpt")), "--data", s(&w.path("data"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("format error"), "{}", stderr(&o));
}

#[test]
fn verify_reports_the_identity() {
    let o = run(&["verify", "--trials", "10000", "--seed", "3"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let residual: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("max_residual "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(residual < 1e-10);

    let once = |seed: &str| stdout(&run(&["verify", "--trials", "1", "--seed", seed])).lines().nth(1).map(str::to_owned);
    assert_eq!(once("5"), once("5"));

    let o = run(&["verify", "--trials", "50", "--violate-barycentric", "0.2,-0.1,0.4"]);
    assert!(!o.status.success());
    assert!(stdout(&o).contains("matches"), "{}", stdout(&o));

    assert!(!run(&["verify", "--trials", "0"]).status.success());
    assert!(!run(&["verify", "--violate-barycentric", "1,2"]).status.success());
}

#[test]
fn gradcheck_lists_every_operation() {
    let o = run(&["gradcheck", "--preset", "tiny", "--trials", "10"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    for op in wsaflow::checks::OPS {
        assert!(text.lines().any(|l| l.starts_with(&format!("{op}\t"))), "{op}");
    }
    assert!(text.lines().any(|l| l.starts_with("network\t")));
}

#[test]
fn ablate_prints_four_variants_reproducibly() {
    let w = Workspace::new();
    let cfg = w.path("tiny.toml");
    let o = run(&["ablate", "--config", s(&cfg), "--log-dir", s(&w.path("logs"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "variant EPE3D Acc3DS Acc3DR Outliers3D");
    let names: Vec<&str> = lines[1..].iter().map(|l| l.split(' ').next().unwrap()).collect();
    assert_eq!(names, ["MN", "MN+DD", "MN+WSA", "MN+DD+WSA"]);
    assert!(lines[1..].iter().all(|l| l.split(' ').count() == 5));

    for (slug, has_lp) in [("mn", false), ("mn_dd", false), ("mn_wsa", true), ("mn_dd_wsa", true)] {
        let log = std::fs::read_to_string(w.path(&format!("logs/{slug}/train.log"))).unwrap();
        let lp = log.lines().nth(1).unwrap().split('\t').nth(3).unwrap();
        assert_eq!(lp != "n/a", has_lp, "{slug}: {lp}");
    }

    let again = run(&["ablate", "--config", s(&cfg)]);
    assert_eq!(stdout(&again), table);
}

#[test]
fn help_lists_flags_and_unknown_flags_fail() {
    let flags: [(&str, &[&str]); 7] = [
        ("gen", &["--config", "--out-dir", "--count", "--seed"]),
        ("train", &["--config", "--data", "--out", "--resume"]),
        ("eval", &["--ckpt", "--data"]),
        ("infer", &["--ckpt", "--src", "--tgt", "--out-flow", "--out-ply"]),
        ("verify", &["--trials", "--seed", "--violate-barycentric"]),
        ("gradcheck", &["--preset"]),
        ("ablate", &["--config", "--log-dir"]),
    ];
    for (cmd, expected) in flags {
        let o = run(&[cmd, "--help"]);
        assert!(o.status.success());
        let text = stdout(&o);
        for f in expected {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
        assert!(!run(&[cmd, "--no-such-flag"]).status.success());
    }
}
