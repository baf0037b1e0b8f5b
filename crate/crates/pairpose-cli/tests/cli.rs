//! End-to-end smoke tests for the command-line surface.

use std::path::Path;
use std::process::{Command, Output};

fn pairpose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pairpose"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_tiny_config(dir: &Path) -> String {
    let path = dir.join("cfg.json");
    std::fs::write(
        &path,
        r#"{
            "seed": 11,
            "dataset": {
                "train_count": 8, "test_count": 4,
                "point_budget": 24, "min_visible": 10
            },
            "model": {
                "d_rgb": 8, "d_depth": 8, "d_fusion": 16,
                "rank_l": 4, "d_out": 16, "group_size": 4
            },
            "train": { "steps": 2, "batch_size": 2, "loss_points": 12 },
            "eval": { "metric_points": 24 },
            "refiner": { "feat_dim": 8, "hidden_dim": 16, "steps": 2, "batch_size": 2 }
        }"#,
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn full_pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let data_dir = dir.path().join("data");
    let train_dir = dir.path().join("train");
    let eval_dir = dir.path().join("eval");
    let refine_dir = dir.path().join("refine");

    let out = pairpose(&["gen-data", "--config", &cfg, "--out", data_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data_dir.join("train.ppd").exists());
    assert!(data_dir.join("test.ppd").exists());
    assert!(data_dir.join("manifest.json").exists());

    let out = pairpose(&[
        "train",
        "--config",
        &cfg,
        "--out",
        train_dir.to_str().unwrap(),
        "--data",
        data_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let checkpoint = train_dir.join("checkpoint.bin");
    assert!(checkpoint.exists());
    assert!(train_dir.join("train_log.csv").exists());
    assert!(train_dir.join("manifest.json").exists());

    let out = pairpose(&[
        "eval",
        "--config",
        &cfg,
        "--out",
        eval_dir.to_str().unwrap(),
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--refine",
        "0",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(eval_dir.join("records.csv").exists());
    assert!(eval_dir.join("summary.json").exists());
    let summary: serde_json::Value =
        serde_json::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap();
    assert_eq!(summary["record_count"], 4);

    let out = pairpose(&[
        "refine-train",
        "--config",
        &cfg,
        "--out",
        refine_dir.to_str().unwrap(),
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--data",
        data_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let refined = refine_dir.join("checkpoint_refined.bin");
    assert!(refined.exists());

    // Refined checkpoint evaluates with refinement enabled.
    let out = pairpose(&[
        "eval",
        "--config",
        &cfg,
        "--out",
        eval_dir.to_str().unwrap(),
        "--checkpoint",
        refined.to_str().unwrap(),
        "--refine",
        "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out = pairpose(&["gen-data", "--config", &cfg, "--out", a.to_str().unwrap()]);
    assert!(out.status.success());
    let out = pairpose(&[
        "gen-data",
        "--config",
        &cfg,
        "--out",
        b.to_str().unwrap(),
        "--seed",
        "999",
    ]);
    assert!(out.status.success());
    let bytes_a = std::fs::read(a.join("train.ppd")).unwrap();
    let bytes_b = std::fs::read(b.join("train.ppd")).unwrap();
    assert_ne!(bytes_a, bytes_b);
}

#[test]
fn identical_invocations_are_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out_dir in [&a, &b] {
        let out = pairpose(&[
            "train",
            "--config",
            &cfg,
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(
        std::fs::read(a.join("checkpoint.bin")).unwrap(),
        std::fs::read(b.join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn bad_config_yields_json_error_and_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"seed": 1, "learning_rat": 0.1}"#).unwrap();
    let out = pairpose(&[
        "train",
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let parsed: serde_json::Value =
        serde_json::from_str(stderr.trim()).expect("stderr is machine-readable JSON");
    assert_eq!(parsed["error"]["kind"], "config");
    assert!(parsed["error"]["message"].as_str().unwrap().contains("learning_rat"));
}

#[test]
fn gradcheck_verb_prints_reports() {
    let out = pairpose(&[
        "gradcheck",
        "--trials",
        "2",
        "--network-trials",
        "1",
        "--seed",
        "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS: matmul"));
    assert!(stdout.contains("network_lrbp_dcm"));
}

#[test]
fn missing_refiner_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let train_dir = dir.path().join("train");
    let out = pairpose(&["train", "--config", &cfg, "--out", train_dir.to_str().unwrap()]);
    assert!(out.status.success());
    // Evaluating with refinement against a refiner-less checkpoint fails
    // with a checkpoint-kind error.
    let out = pairpose(&[
        "eval",
        "--config",
        &cfg,
        "--out",
        dir.path().join("eval").to_str().unwrap(),
        "--checkpoint",
        train_dir.join("checkpoint.bin").to_str().unwrap(),
        "--refine",
        "2",
    ]);
    assert!(!out.status.success());
    let parsed: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(parsed["error"]["kind"], "checkpoint");
}
