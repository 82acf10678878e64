//! End-to-end runs of the `pbr` binary on tiny datasets.

use pbr_core::detector::{Detector, DetectorConfig};
use pbr_core::harness::RunConfig;
use pbr_core::tensor::weights_digest;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pbr(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pbr")).args(args).current_dir(cwd).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}\nstderr: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}

fn tiny_detector(epochs: usize) -> DetectorConfig {
    let mut c = DetectorConfig { channels: 8, backbone_widths: [4, 8, 8, 8, 8], head_hidden: 16, epochs, ..Default::default() };
    c.attention_groups = 2;
    c.optim.batch_size = 2;
    c.val_log_images = 2;
    c
}

fn write_config(dir: &Path, name: &str, detector: DetectorConfig) -> PathBuf {
    let cfg = RunConfig { detector, train_data: "data/train".into(), val_data: "data/val".into(), output_dir: format!("runs/{name}").into() };
    let path = dir.join(format!("{name}.json"));
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run_meta.json" {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_byte_identical_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&pbr(&["synth", "--out", "a", "--train", "6", "--val", "3", "--seed", "5"], tmp.path()));
    ok(&pbr(&["synth", "--out", "b", "--train", "6", "--val", "3", "--seed", "5"], tmp.path()));
    ok(&pbr(&["synth", "--out", "c", "--train", "6", "--val", "3", "--seed", "6"], tmp.path()));
    let a = files(&tmp.path().join("a"));
    assert_eq!(a.len(), 6 + 3 + 2 + 1);
    assert_eq!(a, files(&tmp.path().join("b")));
    assert_ne!(a, files(&tmp.path().join("c")));
    assert!(tmp.path().join("a/run_meta.json").exists());
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&pbr(&["synth", "--out", "data", "--train", "2", "--val", "1"], tmp.path()));
    let cfg = write_config(tmp.path(), "init", tiny_detector(0));
    ok(&pbr(&["train", "--config", cfg.to_str().unwrap()], tmp.path()));
    let run = tmp.path().join("runs/init");
    let reference = tmp.path().join("reference");
    Detector::new(tiny_detector(0)).unwrap().save(&reference).unwrap();
    assert_eq!(weights_digest(&run).unwrap(), weights_digest(&reference).unwrap());
    assert!(run.join("config_echo.json").exists());
    assert!(fs::read_to_string(run.join("loss.svg")).unwrap().contains("warning:"));
}

#[test]
fn full_pipeline_and_echo_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&pbr(&["synth", "--out", "data", "--train", "8", "--val", "3"], d));
    let cfg = write_config(d, "tiny", tiny_detector(1));
    ok(&pbr(&["train", "--config", cfg.to_str().unwrap(), "--out", "runs/first"], d));
    ok(&pbr(&["train", "--config", "runs/first/config_echo.json", "--out", "runs/second"], d));
    let (first, second) = (d.join("runs/first"), d.join("runs/second"));
    assert_eq!(weights_digest(&first).unwrap(), weights_digest(&second).unwrap());
    assert_eq!(fs::read(first.join("train_log.csv")).unwrap(), fs::read(second.join("train_log.csv")).unwrap());

    ok(&pbr(&["eval", "--ckpt", "runs/first", "--data", "data/val", "--out", "eval1"], d));
    ok(&pbr(&["eval", "--ckpt", "runs/second", "--data", "data/val", "--out", "eval2"], d));
    for f in ["report.json", "report.csv", "stage_iou.svg", "pr_curves.svg"] {
        let a = fs::read(d.join("eval1").join(f)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, fs::read(d.join("eval2").join(f)).unwrap(), "{f}");
    }
    let csv = fs::read_to_string(d.join("eval1/report.csv")).unwrap();
    assert!(csv.starts_with("metric,value\n"));

    fs::copy(first.join("train_log.csv"), d.join("eval1/train_log.csv")).unwrap();
    ok(&pbr(&["report", "--from", "eval1", "--out", "plots"], d));
    for f in ["stage_iou.svg", "pr_curves.svg", "loss.svg", "config_echo.json", "run_meta.json"] {
        assert!(d.join("plots").join(f).exists(), "{f}");
    }
    assert_eq!(fs::read(d.join("plots/stage_iou.svg")).unwrap(), fs::read(d.join("eval1/stage_iou.svg")).unwrap());

    let out = pbr(&["infer", "--ckpt", "runs/first", "--image", "data/val/images/000000.ppm", "--out", "viz/scene.svg"], d);
    ok(&out);
    let svg = fs::read_to_string(d.join("viz/scene.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("data:image/png;base64,"));
}

#[test]
fn config_errors_exit_1_with_json_path() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    fs::write(&path, r#"{"detector": {"refine": {"clamp": 0.5}}}"#).unwrap();
    let out = pbr(&["train", "--config", path.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("detector.refine"), "{err}");

    fs::write(&path, r#"{"detector": {"refine": {"schedule": [0.5]}}}"#).unwrap();
    let out = pbr(&["train", "--config", path.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("detector.refine"));
}

#[test]
fn missing_dataset_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "nodata", tiny_detector(1));
    let out = pbr(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_thread_count_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_pbr"))
        .args(["synth", "--out", "x", "--train", "1", "--val", "1"])
        .current_dir(tmp.path())
        .env("PBR_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn selftest_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = pbr(&["selftest"], tmp.path());
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("all 4 suites passed"));
}
