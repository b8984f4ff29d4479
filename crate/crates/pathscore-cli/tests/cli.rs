//! End-to-end checks of the binary: reproducibility of outputs, config
//! validation errors and preset/subcommand agreement.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pathscore"))
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("cfg.json");
    std::fs::write(&p, body).unwrap();
    p.display().to_string()
}

const TINY: &str = r#"{
  "kind": "score-bridge",
  "model": {"id": 1, "kappa": 2.0, "sigma": 0.3},
  "theta": [-0.4, -0.5],
  "level": 4,
  "particles": 32,
  "horizon": 2,
  "seed": 11,
  "replications": 3,
  "x_star": 0.2,
  "data": {"kind": "simulate", "level": 5}
}"#;

#[test]
fn outputs_are_byte_identical_across_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    for sub in ["a", "b"] {
        let st = bin()
            .args([
                "score-bridge",
                "--config",
                &cfg,
                "--out",
                dir.path().join(sub).to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert!(st.success());
    }
    for name in ["summary.csv", "rep_0000.csv", "rep_0002.csv"] {
        let a = std::fs::read(dir.path().join("a").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between reruns");
    }
}

#[test]
fn worker_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    for (sub, workers) in [("w1", "1"), ("w2", "2")] {
        let st = bin()
            .args([
                "score-bridge",
                "--config",
                &cfg,
                "--workers",
                workers,
                "--out",
                dir.path().join(sub).to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert!(st.success());
    }
    let a = std::fs::read(dir.path().join("w1").join("summary.csv")).unwrap();
    let b = std::fs::read(dir.path().join("w2").join("summary.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn kind_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = bin()
        .args(["score-direct", "--config", &cfg, "--out", "/tmp/unused"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("does not match"), "{msg}");
}

#[test]
fn invalid_config_reports_field() {
    let dir = tempfile::tempdir().unwrap();
    let bad = TINY.replace("\"particles\": 32,", "");
    let cfg = write_config(dir.path(), &bad);
    let out = bin()
        .args(["score-bridge", "--config", &cfg, "--out", "/tmp/unused"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("particles"), "{msg}");
}

#[test]
fn preset_listing_and_print_config() {
    let out = bin().arg("list-presets").output().unwrap();
    assert!(out.status.success());
    let names = String::from_utf8_lossy(&out.stdout);
    assert!(names.contains("fig3-model1"));
    assert!(names.contains("fig4-model1-desk"));

    let out = bin()
        .args(["score-direct", "--preset", "fig3-model1", "--print-config"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let cfg = String::from_utf8_lossy(&out.stdout);
    assert!(cfg.contains("\"particles\": 3000"), "{cfg}");
}

#[test]
fn seed_override_changes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    for (sub, seed) in [("s1", "11"), ("s2", "12")] {
        let st = bin()
            .args([
                "score-bridge",
                "--config",
                &cfg,
                "--seed",
                seed,
                "--out",
                dir.path().join(sub).to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert!(st.success());
    }
    let a = std::fs::read(dir.path().join("s1").join("summary.csv")).unwrap();
    let b = std::fs::read(dir.path().join("s2").join("summary.csv")).unwrap();
    assert_ne!(a, b);
}
