//! End-to-end exercise of the binary: synth → train → eval → predict →
//! detect-eval on a miniature phantom dataset, plus exit-code checks.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_aweunet")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary launches")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let cfg = format!(
        "\
# miniature smoke-test run
dataset_root = {}
seed = 11
epochs = 2
batch_size = 2
optimizer.lr = 0.001
model.base_width = 2
model.input_size = 16
augmentation.enabled = false
phantom.image_size = 64
phantom.count = 10
phantom.nodule_count_min = 1
phantom.nodule_count_max = 1
phantom.radius_min = 5
phantom.radius_max = 8
phantom.contrast_min = 70
phantom.contrast_max = 110
",
        data.display()
    );
    let path = dir.join("smoke.cfg");
    std::fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn full_cli_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let data = dir.path().join("data");
    let run_dir = dir.path().join("run");

    // synth
    let stdout = run_ok(&["synth", "--config", cfg, "--out", data.to_str().unwrap()]);
    assert!(stdout.contains("10 phantoms"), "unexpected synth output: {stdout}");
    assert!(data.join("manifest.csv").is_file());
    assert!(data.join("images").join("phantom_0000.png").is_file());
    assert!(data.join("masks").join("phantom_0009.png").is_file());

    // train
    let stdout = run_ok(&["train", "--config", cfg, "--out", run_dir.to_str().unwrap()]);
    assert!(stdout.contains("trained 2 epochs"), "unexpected train output: {stdout}");
    let ckpt = run_dir.join("best.ckpt");
    assert!(ckpt.is_file());
    assert!(run_dir.join("last.ckpt").is_file());
    let log = std::fs::read_to_string(run_dir.join("trainlog.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,val_loss,val_dsc,val_iou,wall_seconds"));
    assert_eq!(log.lines().count(), 3); // header + 2 epochs

    // eval on the test split
    let eval_dir = dir.path().join("eval");
    run_ok(&[
        "eval",
        "--config",
        cfg,
        "--out",
        eval_dir.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--split",
        "test",
    ]);
    let metrics: std::collections::BTreeMap<String, f64> =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("metrics.json")).unwrap())
            .unwrap();
    for key in ["acc", "sen", "spe", "dsc", "iou", "auc_roc", "auc_pr", "threshold"] {
        assert!(metrics.contains_key(key), "metrics.json missing {key}");
        assert!(metrics[key].is_finite());
    }
    let per_image = std::fs::read_to_string(eval_dir.join("per_image.csv")).unwrap();
    assert!(per_image.starts_with("source,acc,sen,spe,dsc,iou"));
    assert_eq!(per_image.lines().count(), 3); // header + 2 test images
    assert!(eval_dir.join("roc.csv").is_file());
    assert!(eval_dir.join("pr.csv").is_file());

    // predict on one image with the baseline detector
    let image = data.join("images").join("phantom_0000.png");
    let pred_dir = dir.path().join("pred");
    run_ok(&[
        "predict",
        "--config",
        cfg,
        "--out",
        pred_dir.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        image.to_str().unwrap(),
    ]);
    assert!(pred_dir.join("phantom_0000_mask.png").is_file());
    let dets = std::fs::read_to_string(pred_dir.join("phantom_0000_detections.csv")).unwrap();
    assert!(dets.starts_with("image,x,y,w,h,score"));

    // predict again with those detections fed back through csv:
    let det_csv = pred_dir.join("phantom_0000_detections.csv");
    let pred2_dir = dir.path().join("pred2");
    run_ok(&[
        "predict",
        "--config",
        cfg,
        "--out",
        pred2_dir.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--detector",
        &format!("csv:{}", det_csv.display()),
        image.to_str().unwrap(),
    ]);
    assert!(pred2_dir.join("phantom_0000_mask.png").is_file());

    // detect-eval on the test split
    let det_dir = dir.path().join("det");
    let stdout = run_ok(&[
        "detect-eval",
        "--config",
        cfg,
        "--out",
        det_dir.to_str().unwrap(),
        "--split",
        "test",
    ]);
    assert!(stdout.contains("AP@0.5"), "unexpected detect-eval output: {stdout}");
    let metrics: std::collections::BTreeMap<String, f64> =
        serde_json::from_str(&std::fs::read_to_string(det_dir.join("metrics.json")).unwrap())
            .unwrap();
    assert!(metrics["ap"] >= 0.0 && metrics["ap"] <= 1.0);
    assert!(det_dir.join("detections.csv").is_file());
}

#[test]
fn bad_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    std::fs::write(&path, "no_such_key = 1\n").unwrap();
    let out = run(&["synth", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("no_such_key"), "unhelpful error: {stderr}");
}

#[test]
fn missing_manifest_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg");
    std::fs::write(
        &path,
        format!("dataset_root = {}\n", dir.path().join("nowhere").display()),
    )
    .unwrap();
    let out = run(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unknown_detector_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "detect-eval",
        "--out",
        dir.path().join("o").to_str().unwrap(),
        "--detector",
        "magic",
    ]);
    assert_eq!(out.status.code(), Some(2));
}
