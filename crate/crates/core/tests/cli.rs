mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::dir_bytes;
use sat_core::checkpoint::Checkpoint;
use sat_core::config::{RunConfig, Variant};
use sat_core::eval::{evaluate, AgeMap, EvalReport};
use sat_core::model::{SatConfig, ScoreMode};
use sat_core::optim::OptimConfig;
use sat_core::pipeline::train_run;
use sat_core::synth::{read_dataset, SynthConfig};

fn sat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sat")).args(args).env("SAT_LOG", "warn").output().expect("sat runs")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn small_config(variant: Variant, epochs: usize, samples: usize) -> RunConfig {
    RunConfig {
        model: SatConfig { embed_dim: 8, image_size: 16, channel_widths: vec![4, 8], ..SatConfig::default() },
        optim: OptimConfig { epochs, batch_size: 8, ..OptimConfig::default() },
        data: SynthConfig { num_samples: samples, image_size: 16, seed: 5, ..SynthConfig::default() },
        variant,
        seed: 11,
        ..RunConfig::default()
    }
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Workspace { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn config(&self, name: &str, cfg: &RunConfig) -> String {
        std::fs::write(self.path(name), cfg.to_json().unwrap()).unwrap();
        self.s(name)
    }

    fn gen(&self, cfg: &str, out: &str) {
        ok(sat(&["gen", cfg, "--out", &self.s(out)]));
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_is_deterministic_and_prints_a_correlation_matrix() {
    let ws = Workspace::new();
    let cfg = ws.config("run.json", &small_config(Variant::Sat, 1, 20));
    let first = ok(sat(&["gen", &cfg, "--out", &ws.s("a")]));
    ok(sat(&["gen", &cfg, "--out", &ws.s("b")]));
    assert_eq!(dir_bytes(&ws.path("a")), dir_bytes(&ws.path("b")));

    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(ws.path("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["num_regions"], 5);
    assert_eq!(manifest["class_counts"], serde_json::json!([9, 5, 6, 7, 6]));
    assert_eq!(manifest["num_samples"], 20);

    let rows: Vec<Vec<f64>> =
        first.lines().skip(2).map(|l| l.split_whitespace().skip(1).map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 5);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[i], 1.0);
        for (j, &v) in row.iter().enumerate() {
            assert_eq!(v, rows[j][i]);
        }
    }

    ok(sat(&["gen", &cfg, "--out", &ws.s("c"), "--seed", "6", "--num-samples", "4"]));
    assert_eq!(read_dataset(&ws.path("c")).unwrap().len(), 4);
}

#[test]
fn train_writes_artifacts_and_is_reproducible() {
    let ws = Workspace::new();
    let cfg = ws.config("run.json", &small_config(Variant::Sat, 3, 16));
    ws.gen(&cfg, "data");
    for out in ["r1", "r2"] {
        ok(sat(&["train", &cfg, "--data", &ws.s("data"), "--out", &ws.s(out)]));
    }
    let metrics = std::fs::read_to_string(ws.path("r1/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    assert!(metrics.starts_with("epoch,lr,loss_total,loss_ce,loss_mean,loss_variance,train_mae_lateral_condyle"));
    for f in ["ckpt_final.bin", "ckpt_best.bin", "ckpt_last.bin"] {
        assert!(ws.path("r1").join(f).exists(), "{f}");
    }
    assert_eq!(dir_bytes(&ws.path("r1")), dir_bytes(&ws.path("r2")));
}

#[test]
fn baseline_checkpoint_omits_bias_scalars() {
    let ws = Workspace::new();
    let cfg = ws.config("run.json", &small_config(Variant::MvmtVit, 1, 8));
    ws.gen(&cfg, "data");
    ok(sat(&["train", &cfg, "--data", &ws.s("data"), "--out", &ws.s("vit")]));
    let ck = Checkpoint::load(&ws.path("vit/ckpt_final.bin")).unwrap();
    assert!(!ck.params.contains("rab_scalars"));
    let raw = std::fs::read(ws.path("vit/ckpt_final.bin")).unwrap();
    assert!(!raw.windows(11).any(|w| w == b"rab_scalars"));
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let ws = Workspace::new();
    let cfg = ws.config("run.json", &small_config(Variant::Sat, 3, 16));
    ws.gen(&cfg, "data");
    ok(sat(&["train", &cfg, "--data", &ws.s("data"), "--out", &ws.s("straight")]));
    let stopped = ok(sat(&["train", &cfg, "--data", &ws.s("data"), "--out", &ws.s("split"), "--stop-after", "1"]));
    assert!(stopped.contains("stopped"));
    assert!(!ws.path("split/ckpt_final.bin").exists());
    ok(sat(&[
        "train",
        &cfg,
        "--data",
        &ws.s("data"),
        "--out",
        &ws.s("split"),
        "--resume",
        &ws.s("split/ckpt_last.bin"),
    ]));
    assert_eq!(dir_bytes(&ws.path("straight")), dir_bytes(&ws.path("split")));

    // a checkpoint from another configuration is refused
    let other = ws.config("other.json", &RunConfig { seed: 12, ..small_config(Variant::Sat, 3, 16) });
    let out =
        sat(&["train", &other, "--data", &ws.s("data"), "--resume", &ws.s("split/ckpt_last.bin"), "--out", &ws.s("x")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn checkpoint_eval_equals_in_memory_eval() {
    let ws = Workspace::new();
    let run = small_config(Variant::Sat, 2, 16);
    let cfg = ws.config("run.json", &run);
    ws.gen(&cfg, "data");
    let data = read_dataset(&ws.path("data")).unwrap();
    let outcome = train_run(&run, &data, &ws.path("lib"), None, None).unwrap();
    let direct = evaluate(&outcome.trainer.model, &data, &[1.0], &AgeMap::default(), ScoreMode::Expected, 64).unwrap();

    let csv = ok(sat(&["eval", "--ckpt", &ws.s("lib/ckpt_final.bin"), "--data", &ws.s("data"), "--theta", "1"]));
    let from_disk = EvalReport::read(&ws.path("lib/report.json")).unwrap();
    assert_eq!(from_disk, direct);
    assert_eq!(csv, std::fs::read_to_string(ws.path("lib/report.csv")).unwrap());
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    assert_eq!(header, ["region", "mae", "cs_1", "anisotropy"]);
    assert_eq!(from_disk.cs.len(), 1);
    assert_eq!(from_disk.cs[0].per_region.len(), 5);
}

#[test]
fn overfit_training_set_is_scored_almost_perfectly() {
    let ws = Workspace::new();
    let mut run = small_config(Variant::Sat, 150, 8);
    run.optim.batch_size = 4;
    run.optim.base_lr = 0.1;
    run.augment.enabled = false;
    let cfg = ws.config("run.json", &run);
    ws.gen(&cfg, "data");
    ok(sat(&["train", &cfg, "--data", &ws.s("data"), "--out", &ws.s("fit")]));
    ok(sat(&["eval", "--ckpt", &ws.s("fit/ckpt_final.bin"), "--data", &ws.s("data"), "--out", &ws.s("fit")]));
    let report = EvalReport::read(&ws.path("fit/report.json")).unwrap();
    let worst = report.per_region_mae.iter().copied().fold(0.0, f64::max);
    assert!(worst <= 0.25, "{:?}", report.per_region_mae);
}

#[test]
fn compare_and_inspect() {
    let ws = Workspace::new();
    let run = small_config(Variant::Sat, 1, 8);
    let cfg = ws.config("run.json", &run);
    ws.gen(&cfg, "data");
    ok(sat(&["train", &cfg, "--data", &ws.s("data"), "--out", &ws.s("m")]));
    let ckpt = ws.s("m/ckpt_final.bin");
    ok(sat(&["eval", "--ckpt", &ckpt, "--data", &ws.s("data")]));
    let report = ws.s("m/report.json");

    let text = ok(sat(&["compare", "--report", &report, &report]));
    assert!(text.contains("p=1 "), "{text}");
    let names: Vec<&str> = text.lines().skip(2).map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(names, ["lateral_condyle", "trochlea", "proximal_ap", "olecranon", "proximal_lateral", "sum", "baa"]);
    let json: serde_json::Value =
        serde_json::from_str(&ok(sat(&["compare", "--report", &report, &report, "--json"]))).unwrap();
    assert_eq!(json["wilcoxon"]["p_value"], 1.0);
    assert!(json["region_mae_delta"].as_array().unwrap().iter().all(|d| d == 0.0));

    // reports over different sample counts cannot be paired
    ws.gen(
        &ws.config(
            "small.json",
            &RunConfig { data: SynthConfig { num_samples: 6, ..run.data.clone() }, ..run.clone() },
        ),
        "data6",
    );
    ok(sat(&["eval", "--ckpt", &ckpt, "--data", &ws.s("data6"), "--out", &ws.s("six")]));
    assert_eq!(sat(&["compare", "--report", &report, &ws.s("six/report.json")]).status.code(), Some(2));

    let text = ok(sat(&["inspect", "--ckpt", &ckpt, "--data", &ws.s("data"), "--sample", "3", "--out", &ws.s("attn")]));
    assert!(text.contains("wrote 4 attention matrices"));
    let mut count = 0;
    for l in 0..run.model.depth {
        for h in 0..run.model.num_heads {
            let csv = std::fs::read_to_string(ws.path(&format!("attn/attn_L{l}_H{h}.csv"))).unwrap();
            let rows: Vec<f64> = csv.lines().map(|r| r.split(',').map(|v| v.parse::<f64>().unwrap()).sum()).collect();
            assert_eq!(rows.len(), 10);
            assert!(rows.iter().all(|s| (s - 1.0).abs() <= 1e-6));
            count += 1;
        }
    }
    assert_eq!(std::fs::read_dir(ws.path("attn")).unwrap().count(), count);
    let out = sat(&["inspect", "--ckpt", &ckpt, "--data", &ws.s("data"), "--sample", "8"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let ws = Workspace::new();
    let run = small_config(Variant::Sat, 1, 8);
    let cfg = ws.config("run.json", &run);
    ws.gen(&cfg, "data");

    std::fs::write(ws.path("typo.json"), r#"{"variant": "sat", "epochs": 3}"#).unwrap();
    let out = sat(&["gen", &ws.s("typo.json"), "--out", &ws.s("x")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochs"));

    let mismatched = RunConfig {
        model: SatConfig { class_counts: vec![9, 5, 6, 7, 7], ..run.model.clone() },
        data: SynthConfig { class_counts: vec![9, 5, 6, 7, 7], ..run.data.clone() },
        ..run.clone()
    };
    let bad = ws.config("k.json", &mismatched);
    assert_eq!(sat(&["train", &bad, "--data", &ws.s("data"), "--out", &ws.s("y")]).status.code(), Some(2));

    let exploding = ws.config(
        "nan.json",
        &RunConfig { optim: OptimConfig { base_lr: 1e300, rho: 0.0, ..run.optim.clone() }, ..run.clone() },
    );
    let out = sat(&["train", &exploding, "--data", &ws.s("data"), "--out", &ws.s("z")]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    assert_eq!(sat(&["eval", "--ckpt", p(&ws.path("missing.bin")), "--data", &ws.s("data")]).status.code(), Some(2));
    assert_eq!(sat(&["bogus"]).status.code(), Some(2));
}
