use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const CLASSES: u8 = 4;

/// 4x4 images whose bright band position encodes the class.
fn idx_fixture(dir: &Path, stem: &str, n: u32, first_class: u8) -> (PathBuf, PathBuf) {
    let mut images = vec![0, 0, 8, 3];
    images.extend_from_slice(&n.to_be_bytes());
    images.extend_from_slice(&4u32.to_be_bytes());
    images.extend_from_slice(&4u32.to_be_bytes());
    let mut labels = vec![0, 0, 8, 1];
    labels.extend_from_slice(&n.to_be_bytes());
    for i in 0..n {
        let class = first_class + (i % CLASSES as u32) as u8;
        labels.push(class);
        for k in 0..16u32 {
            let on = (k + 3 * class as u32) % 16 < 5;
            let jitter = (i * 7 + k * 13) % 40;
            images.push(if on { 215 + jitter as u8 } else { jitter as u8 });
        }
    }
    let (ip, lp) = (dir.join(format!("{stem}-images")), dir.join(format!("{stem}-labels")));
    fs::write(&ip, images).unwrap();
    fs::write(&lp, labels).unwrap();
    (ip, lp)
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        fs::create_dir_all(&data).unwrap();
        idx_fixture(&data, "train", 48, 0);
        idx_fixture(&data, "test", 24, 0);
        Fixture { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn config(&self, name: &str, hyper_extra: &str, pairs_extra: &str) -> PathBuf {
        let text = format!(
            r#"{{
  "hyper": {{"preset": "custom", "epochs": 3, "batch_size": 8, "alpha": 0.1 {hyper_extra}}},
  "data": {{
    "train": {{"format": "idx", "images": "train-images", "labels": "train-labels"}},
    "test": {{"format": "idx", "images": "test-images", "labels": "test-labels"}}
  }},
  "pairs": {{"label_budget": 30 {pairs_extra}}}
}}"#
        );
        let path = self.path(name);
        fs::write(&path, text).unwrap();
        path
    }

    fn seven(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_seven"))
            .args(args)
            .env("SEVEN_DATA_DIR", self.path("data"))
            .env("RUST_LOG", "info")
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stderr: {}", stderr(&o));
    o
}

fn data_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(str::to_string).collect()
}

#[test]
fn ingest_writes_archive_and_summary_idempotently() {
    let f = Fixture::new();
    let args = [
        "ingest",
        "--format",
        "idx",
        "--images",
        "data/train-images",
        "--labels",
        "data/train-labels",
        "--out",
        "ingested",
    ];
    ok(f.seven(&args));
    let archive = fs::read(f.path("ingested/train.samples")).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.path("ingested/train.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["samples"], 48);
    assert_eq!(summary["classes"]["0"], 12);
    assert_eq!(summary["shape"], serde_json::json!([1, 4, 4]));
    ok(f.seven(&args));
    assert_eq!(fs::read(f.path("ingested/train.samples")).unwrap(), archive);
}

#[test]
fn missing_input_exits_2_naming_the_path() {
    let f = Fixture::new();
    let o = f.seven(&["ingest", "--format", "idx", "--images", "nope-images", "--labels", "data/train-labels"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nope-images"), "{}", stderr(&o));

    let o = f.seven(&["eval", "--checkpoint", "missing.ckpt", "--pairs", "a", "--samples", "b"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing.ckpt"));
}

#[test]
fn usage_and_config_errors_exit_2_before_compute() {
    let f = Fixture::new();
    assert_eq!(code(&f.seven(&["train"])), 2);
    assert_eq!(code(&f.seven(&["no-such-verb"])), 2);

    let bad = f.config("bad.json", r#", "alfa": 1"#, "");
    let o = f.seven(&["train", "--config", bad.to_str().unwrap(), "--out", "bad-run"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("alfa"), "{}", stderr(&o));
    assert!(!f.path("bad-run").exists());

    let invalid = f.config("invalid.json", r#", "tau": -1"#, "");
    assert_eq!(code(&f.seven(&["train", "--config", invalid.to_str().unwrap()])), 2);

    let cfg = f.config("ok.json", "", "");
    let o = Command::new(env!("CARGO_BIN_EXE_seven"))
        .args(["train", "--config", cfg.to_str().unwrap()])
        .env("SEVEN_DATA_DIR", f.path("elsewhere"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("elsewhere"));
}

#[test]
fn train_writes_a_reproducible_run_directory() {
    let f = Fixture::new();
    let cfg = f.config("run.json", r#", "checkpoint_every": 1"#, "");
    let cfg = cfg.to_str().unwrap();
    ok(f.seven(&["train", "--config", cfg, "--out", "a"]));
    ok(f.seven(&["train", "--config", cfg, "--out", "b"]));
    for name in [
        "config.json",
        "train.pairs",
        "test.pairs",
        "trace.csv",
        "timing.csv",
        "final.ckpt",
        "eval.json",
        "checkpoints/epoch-0001.ckpt",
        "checkpoints/epoch-0002.ckpt",
    ] {
        assert!(f.path("a").join(name).exists(), "{name}");
    }
    assert!(!f.path("a/checkpoints/epoch-0003.ckpt").exists());
    for name in ["trace.csv", "final.ckpt", "train.pairs", "eval.json"] {
        assert_eq!(fs::read(f.path("a").join(name)).unwrap(), fs::read(f.path("b").join(name)).unwrap(), "{name}");
    }
    assert_eq!(data_rows(&f.path("a/trace.csv")).len(), 3);

    // The resolved config alone reproduces the run.
    let resolved = f.path("a/config.json");
    let text = fs::read_to_string(&resolved).unwrap();
    assert!(text.contains("\"reg_norm\""), "defaults expanded: {text}");
    ok(f.seven(&["train", "--config", resolved.to_str().unwrap(), "--out", "c"]));
    assert_eq!(fs::read(f.path("a/trace.csv")).unwrap(), fs::read(f.path("c/trace.csv")).unwrap());

    ok(f.seven(&["train", "--config", cfg, "--out", "d", "--seed", "5"]));
    assert_ne!(fs::read(f.path("a/final.ckpt")).unwrap(), fs::read(f.path("d/final.ckpt")).unwrap());
}

#[test]
fn disseven_override_forces_alpha_zero() {
    let f = Fixture::new();
    let cfg = f.config("run.json", "", "");
    let o = ok(f.seven(&["train", "--config", cfg.to_str().unwrap(), "--variant", "disseven", "--out", "dis"]));
    assert!(stderr(&o).contains("forces alpha=0"), "{}", stderr(&o));
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.path("dis/config.json")).unwrap()).unwrap();
    assert_eq!(resolved["hyper"]["alpha"], 0.0);
    assert_eq!(resolved["hyper"]["variant"], "disseven");
}

#[test]
fn eval_reports_accuracy_sweep_and_rejects_preset_mismatch() {
    let f = Fixture::new();
    let cfg = f.config("run.json", "", "");
    ok(f.seven(&["train", "--config", cfg.to_str().unwrap(), "--out", "run"]));
    ok(f.seven(&[
        "ingest", "--format", "idx", "--images", "data/test-images", "--labels", "data/test-labels", "--split", "test",
        "--out", "run",
    ]));
    ok(f.seven(&["make-pairs", "--samples", "run/test.samples", "--out", "run", "--name", "all.pairs"]));

    ok(f.seven(&[
        "eval", "--checkpoint", "run/final.ckpt", "--pairs", "run/all.pairs", "--samples", "run/test.samples", "--tau",
        "0.5", "--tau-sweep", "0.05:0.95:19", "--out", "scored",
    ]));
    let eval: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.path("scored/eval.json")).unwrap()).unwrap();
    let acc = eval["report"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(eval["report"]["total"], 48);
    assert_eq!(eval["report"]["tau"], 0.5);
    let sweep = data_rows(&f.path("scored/tau_sweep.csv"));
    assert_eq!(sweep.len(), 19);
    assert!(sweep[0].starts_with("0.05,"));

    // Scoring through the config uses the same test pairs the run did.
    ok(f.seven(&["eval", "--checkpoint", "run/final.ckpt", "--config", cfg.to_str().unwrap(), "--out", "via-config"]));
    let a: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.path("run/eval.json")).unwrap()).unwrap();
    let b: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.path("via-config/eval.json")).unwrap()).unwrap();
    assert_eq!(a["accuracy"], b["report"]["accuracy"]);

    let o = f.seven(&["eval", "--checkpoint", "run/final.ckpt", "--pairs", "run/all.pairs", "--samples", "run/test.samples", "--preset", "mnist"]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("id 0") && err.contains("id 1"), "{err}");

    let o = f.seven(&["eval", "--checkpoint", "run/final.ckpt", "--pairs", "run/train.pairs", "--samples", "run/test.samples"]);
    assert_eq!(code(&o), 2, "unlabeled manifest: {}", stderr(&o));
}

#[test]
fn make_pairs_counts_and_labels() {
    let f = Fixture::new();
    ok(f.seven(&[
        "ingest", "--format", "idx", "--images", "data/train-images", "--labels", "data/train-labels", "--out", "s",
    ]));
    ok(f.seven(&["make-pairs", "--samples", "s/train.samples", "--label-budget", "10", "--out", "s", "--seed", "3"]));
    let text = fs::read_to_string(f.path("s/pairs.txt")).unwrap();
    let lines: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(lines.len(), 96);
    assert_eq!(lines.iter().filter(|l| !l.ends_with("unl")).count(), 10);
    assert!(text.contains("# label_budget=10"));

    ok(f.seven(&[
        "ingest", "--format", "idx", "--images", "data/test-images", "--labels", "data/test-labels", "--split", "test",
        "--out", "s",
    ]));
    let o = f.seven(&["make-pairs", "--samples", "s/train.samples", "--disjoint-from", "s/test.samples", "--out", "s"]);
    assert_eq!(code(&o), 1, "shared classes: {}", stderr(&o));
}

#[test]
fn ablate_single_variant_matches_train_then_eval() {
    let f = Fixture::new();
    let cfg = f.config("run.json", "", "");
    let cfg = cfg.to_str().unwrap();
    ok(f.seven(&["train", "--config", cfg, "--out", "run"]));
    ok(f.seven(&["ablate", "--config", cfg, "--variants", "seven", "--out", "one"]));
    let rows = data_rows(&f.path("one/ablation.csv"));
    assert_eq!(rows.len(), 1);
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.path("run/eval.json")).unwrap()).unwrap();
    let acc: f64 = rows[0].split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(acc, eval["accuracy"].as_f64().unwrap());

    ok(f.seven(&["ablate", "--config", cfg, "--seeds", "1,2", "--out", "three", "--threads", "2"]));
    let rows = data_rows(&f.path("three/ablation.csv"));
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("seven,") && rows[1].starts_with("disseven,") && rows[2].starts_with("genseven,"));
    assert_eq!(data_rows(&f.path("three/ablation_runs.csv")).len(), 6);
    ok(f.seven(&["ablate", "--config", cfg, "--seeds", "1,2", "--out", "again"]));
    assert_eq!(
        fs::read(f.path("three/ablation.csv")).unwrap(),
        fs::read(f.path("again/ablation.csv")).unwrap()
    );
}

#[test]
fn sweep_alpha_emits_one_row_per_alpha_and_budget() {
    let f = Fixture::new();
    let cfg = f.config("run.json", "", "");
    let cfg = cfg.to_str().unwrap();
    ok(f.seven(&["sweep-alpha", "--config", cfg, "--alphas", "0,0.1,0.5", "--label-budgets", "10,20", "--out", "sw"]));
    let rows = data_rows(&f.path("sw/sweep_alpha.csv"));
    assert_eq!(rows.len(), 6);
    assert_eq!(fs::read_to_string(f.path("sw/sweep_alpha.csv")).unwrap().lines().next(), Some("alpha,accuracy,L"));
    assert!(rows[0].starts_with("0,") && rows[0].ends_with(",10"));
    assert!(rows[5].starts_with("0.5,") && rows[5].ends_with(",20"));
    assert!(f.path("sw/config.json").exists());

    ok(f.seven(&["sweep-alpha", "--config", cfg, "--alphas", "0.2", "--out", "single", "--on-test"]));
    assert_eq!(data_rows(&f.path("single/sweep_alpha.csv")).len(), 1);
}

#[test]
fn non_finite_loss_exits_1() {
    let f = Fixture::new();
    let cfg = f.config("boom.json", r#", "lr": 1e300"#, "");
    let o = f.seven(&["train", "--config", cfg.to_str().unwrap(), "--out", "boom"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
}
