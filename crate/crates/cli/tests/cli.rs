use std::path::Path;
use std::process::{Command, Output};

fn uags(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uags"))
        .args(args)
        .current_dir(cwd)
        .env_remove("UAGS_LOG")
        .output()
        .expect("binary runs")
}

fn status_json(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("status line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {stderr}"))
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = uags(&["--help"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["synth", "init-dynamic", "train", "render", "eval", "scene"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = uags(&["train", "--frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--frobnicate"));
}

#[test]
fn bad_scene_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = uags(&["--json", "scene", "lint", "nowhere"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let s = status_json(&out);
    assert_eq!(s["status"], "error");
    assert_eq!(s["code"], 2);
}

#[test]
fn env_overrides_reach_the_trainer() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(uags(&["synth", "--preset", "three-frame", "--out", "s"], p).status.success());
    std::fs::write(p.join("c.json"), r#"{"schema_version": 1, "iterations": 50, "ua_start": 50}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_uags"))
        .args(["--json", "train", "--scene", "s", "--config", "c.json", "--out", "run"])
        .env("UAGS_ITERATIONS", "3")
        .env("UAGS_UA_START", "2")
        .current_dir(p)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(status_json(&out)["result"]["iterations"], 3);
    let log = std::fs::read_to_string(p.join("run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.lines().last().unwrap().contains("\"ua_active\":true"));

    let out = Command::new(env!("CARGO_BIN_EXE_uags"))
        .args(["train", "--scene", "s", "--config", "c.json", "--out", "run2"])
        .env("UAGS_NOT_A_FIELD", "1")
        .current_dir(p)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("UAGS_NOT_A_FIELD"));
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let steps: [&[&str]; 6] = [
        &["--seed", "1", "synth", "--preset", "one-ellipsoid", "--out", "scene"],
        &["scene", "lint", "scene"],
        &["--seed", "1", "init-dynamic", "--scene", "scene", "--out", "dynamic.ply"],
        &[
            "--seed", "1", "--threads", "1", "train", "--scene", "scene", "--out", "run", "--init", "dynamic.ply",
            "--iterations", "200", "--ua-start", "100",
        ],
        &["eval", "--checkpoint", "run/checkpoint.uags", "--scene", "scene", "--split", "val", "--out", "metrics.csv"],
        &["render", "--checkpoint", "run/checkpoint.uags", "--scene", "scene", "--channel", "uncertainty", "--out", "u"],
    ];
    for args in steps {
        let out = uags(args, p);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let csv = std::fs::read_to_string(p.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("frame_id,psnr,mpsnr,ssim,mssim"));
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().last().unwrap().starts_with("mean,"));
    assert!(p.join("u/val0000.png").exists());
    for name in ["depth", "color", "flow"] {
        let out = uags(
            &["render", "--checkpoint", "run/checkpoint.uags", "--scene", "scene", "--split", "train", "--channel", name, "--out", name],
            p,
        );
        assert!(out.status.success());
    }
    assert_eq!(std::fs::read_dir(p.join("depth")).unwrap().count(), 8);
    assert!(p.join("depth/0000.pfm").exists());
    assert!(p.join("color/0007.png").exists());
    // the last frame has no successor to flow towards
    assert_eq!(std::fs::read_dir(p.join("flow")).unwrap().count(), 7);
}
