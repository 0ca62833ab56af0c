use std::path::Path;
use std::process::Command;

use pbm_core::bnn::TrainState;
use pbm_core::data::{write_idx, Array};
use pbm_core::RandomStream;

fn pbm(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_pbm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = pbm(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Three classes of 8×8 images, each a bright bar at a class-specific row.
fn write_split(dir: &Path, split: &str, n: usize, seed: u64) {
    let mut r = RandomStream::new(seed, 0);
    let mut images = Vec::with_capacity(n * 64);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 3;
        for y in 0..8 {
            for _ in 0..8 {
                let bar = y / 3 == c;
                let v = if bar { 200.0 } else { 30.0 } + 40.0 * r.normal();
                images.push(v.clamp(0.0, 255.0) as u8);
            }
        }
        labels.push(c as u8);
    }
    let images = Array::new(vec![n, 8, 8], images).unwrap();
    let labels = Array::new(vec![n], labels).unwrap();
    write_idx(&dir.join(format!("{split}-images-idx3-ubyte")), &images).unwrap();
    write_idx(&dir.join(format!("{split}-labels-idx1-ubyte")), &labels).unwrap();
}

fn fixture(root: &Path) {
    let id = root.join("id");
    std::fs::create_dir_all(&id).unwrap();
    write_split(&id, "train", 150, 1);
    write_split(&id, "test", 30, 2);
    std::fs::write(
        root.join("cfg.json"),
        r#"{"network": {"conv_width": 2}, "train": {"epochs": 2, "batch_size": 16, "lr": 0.003},
            "eval": {"samples": 4}, "calibration": {"probes": 300}}"#,
    )
    .unwrap();
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(root: &Path, out: &str) {
    ok(&[
        "train",
        "--dataset",
        s(&root.join("id")),
        "--holdout",
        "2",
        "--limit",
        "60",
        "--config",
        s(&root.join("cfg.json")),
        "--seed",
        "4",
        "--out",
        s(&root.join(out)),
    ]);
}

fn eval(root: &Path, ckpt: &str, mode: &str, out: &str) -> String {
    ok(&[
        "eval",
        "--checkpoint",
        s(&root.join(ckpt).join("checkpoint.json")),
        "--id",
        s(&root.join("id")),
        "--holdout",
        "2",
        "--val-start",
        "60",
        "--val-count",
        "40",
        "--mode",
        mode,
        "--config",
        s(&root.join("cfg.json")),
        "--out",
        s(&root.join(out)),
    ])
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn train_then_eval_writes_every_report_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fixture(root);
    train(root, "run");
    train(root, "again");
    for f in ["checkpoint.json", "loss.csv", "config.json"] {
        assert_eq!(
            read(&root.join("run").join(f)).len(),
            read(&root.join("again").join(f)).len()
        );
    }
    assert_eq!(
        read(&root.join("run/checkpoint.json")),
        read(&root.join("again/checkpoint.json"))
    );
    assert_eq!(read(&root.join("run/loss.csv")).lines().count(), 3);

    // the checkpoint has 2 classes and the full ID set 3
    let out = pbm(&[
        "eval",
        "--checkpoint",
        s(&root.join("run/checkpoint.json")),
        "--id",
        s(&root.join("id")),
        "--out",
        s(&root.join("bad")),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let e1 = eval(root, "run", "photonic", "eval");
    let e2 = eval(root, "run", "photonic", "eval2");
    assert_eq!(e1, e2);
    for f in [
        "config.json",
        "roc.csv",
        "roc_holdout-2_se.csv",
        "scatter.csv",
        "confusion.csv",
        "auroc.json",
        "threshold.json",
        "metrics.json",
        "calibration.json",
    ] {
        assert_eq!(
            read(&root.join("eval").join(f)),
            read(&root.join("eval2").join(f)),
            "{f}"
        );
    }
    assert!(read(&root.join("eval/roc.csv")).starts_with("threshold,fpr,tpr"));
    assert!(read(&root.join("eval/confusion.csv")).starts_with("true,predicted,count"));
    let cfg: serde_json::Value =
        serde_json::from_str(&read(&root.join("eval/config.json"))).unwrap();
    assert_eq!(cfg["command"], "eval");
    assert_eq!(cfg["eval"]["samples"], 4);
}

fn mi_column(scatter: &str) -> Vec<f64> {
    scatter
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn zero_sigma_checkpoint_has_zero_mutual_information() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fixture(root);
    train(root, "run");
    let ckpt = root.join("run/checkpoint.json");
    let mut state = TrainState::load(&ckpt).unwrap();
    let pb = state.net.cfg.prob_block;
    let rho = state.net.param_mut(&format!("dws{pb}.rho")).unwrap();
    *rho = rho.map(|_| -1e3);
    std::fs::create_dir_all(root.join("flat")).unwrap();
    state.save(&root.join("flat/checkpoint.json")).unwrap();

    eval(root, "flat", "surrogate", "eval");
    let scatter = read(&root.join("eval/scatter.csv"));
    assert!(scatter.starts_with("dataset,sample_id,mi,se"));
    let mi = mi_column(&scatter);
    assert_eq!(mi.len(), 30);
    assert!(mi.iter().all(|&m| m == 0.0));
    assert!(read(&root.join("eval/threshold.json")).contains("train[60..100]"));
}

#[test]
fn calibrate_and_bench_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cal");
    let text = ok(&[
        "calibrate",
        "--kernels",
        "3",
        "--seed",
        "2",
        "--out",
        s(&out),
    ]);
    assert!(text.contains("/3 kernels converged"), "{text}");
    assert_eq!(read(&out.join("sweep.csv")).lines().count(), 1 + 3 * 9);
    let report: serde_json::Value = serde_json::from_str(&read(&out.join("report.json"))).unwrap();
    assert_eq!(report["n_kernels"], 3);

    let bench = ok(&[
        "bench",
        "--seconds",
        "0.1",
        "--out",
        s(&dir.path().join("b")),
    ]);
    let v: serde_json::Value = serde_json::from_str(&bench).unwrap();
    assert!((v["simulated_throughput"].as_f64().unwrap() - 26.67e9).abs() < 0.005e9);
    assert!(v["simulator_rate"].as_f64().unwrap() > 0.0);
    assert!(v["digital_baseline_rate"].as_f64().unwrap() > 0.0);
    assert!(dir.path().join("b/config.json").exists());
}

#[test]
fn exit_codes() {
    assert_eq!(pbm(&["selftest"]).status.code(), Some(0));
    assert_eq!(pbm(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(pbm(&["bench", "--seconds", "NaN"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let out = pbm(&[
        "train",
        "--dataset",
        s(&missing),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));
    std::fs::write(dir.path().join("bad.json"), "{ nope").unwrap();
    let out = pbm(&[
        "calibrate",
        "--config",
        s(&dir.path().join("bad.json")),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
