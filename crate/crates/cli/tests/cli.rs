use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nvde::io;

fn nvde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nvde")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = nvde(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Synthesize a small sequence and fit it briefly; returns (frames, checkpoint).
fn fitted(dir: &Path) -> (PathBuf, PathBuf) {
    let frames = dir.join("frames");
    let ckpt = dir.join("scene.nvde");
    ok(&["synth", "--preset", "specular", "--size", "12", "--seed", "1", "--out", &s(&frames)]);
    ok(&["fit", "--frames", &s(&frames), "--iters", "3", "--out", &s(&ckpt), "--trace", &s(&dir.join("trace.csv"))]);
    (frames, ckpt)
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(nvde(&[]).status.code(), Some(2));
    assert_eq!(nvde(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(nvde(&["render", "--ckpt", "x.nvde"]).status.code(), Some(2));
    assert_eq!(nvde(&["synth", "--out", "x", "--preset", "glossy"]).status.code(), Some(2));
    assert_eq!(nvde(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = nvde(&["fit", "--frames", &s(&dir.path().join("missing")), "--out", &s(&dir.path().join("a"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let (_, ckpt) = fitted(dir.path());
    let out = nvde(&["render", "--ckpt", &s(&ckpt), "--pose", "0,0,1", "--out", &s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    std::fs::write(dir.path().join("junk.nvde"), b"NVDE1\0junk").unwrap();
    let out = nvde(&["render", "--ckpt", &s(&dir.path().join("junk.nvde")), "--pose", "0,0,0,0,0,0"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn identity_render_reproduces_the_source_frame() {
    let dir = tempfile::tempdir().unwrap();
    let (frames, ckpt) = fitted(dir.path());
    let out = dir.path().join("render");
    ok(&["render", "--ckpt", &s(&ckpt), "--pose", "0,0,0,0,0,0", "--out", &s(&out)]);
    let novel = io::decode_png(&std::fs::read(out.join("novel.png")).unwrap()).unwrap();
    let source = io::decode_png(&std::fs::read(frames.join("frame_000.png")).unwrap()).unwrap();
    assert_eq!(novel, source);
    for name in ["coarse.png", "depth.pfm", "novel_depth.pfm", "vde.pfm", "occlusion.pfm"] {
        assert!(out.join(name).is_file(), "{name}");
    }
    let occ = io::decode_pfm(&std::fs::read(out.join("occlusion.pfm")).unwrap()).unwrap();
    assert!(occ.data().iter().all(|&o| (o - 1.0).abs() < 1e-6));
    // negative components parse as values, not flags
    ok(&["render", "--ckpt", &s(&ckpt), "--pose", "-0.01,0,0,-0.1,0,0", "--out", &s(&out)]);
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 4);
    assert!(trace.starts_with("iteration,loss\n"));
}

#[test]
fn eval_of_identical_images_is_ideal() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("f");
    // the low-frequency metric needs at least the 21 px kernel
    ok(&["synth", "--size", "24", "--out", &s(&frames)]);
    let img = s(&frames.join("frame_000.png"));
    let out = ok(&["eval", "--pred", &img, "--gt", &img, "--scene-id", "s", "--frame-id", "7"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), nvde::metrics::MetricReport::CSV_HEADER);
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&row[..2], &["s", "7"]);
    let vals: Vec<f64> = row[2..].iter().map(|v| v.parse().unwrap()).collect();
    // mae, rmse, psnr, psnr_lf, ssim
    assert_eq!(vals[0], 0.0);
    assert_eq!(vals[1], 0.0);
    assert_eq!(vals[2], 99.0);
    assert_eq!(vals[3], 99.0);
    assert!((vals[4] - 1.0).abs() < 1e-12);

    let other = s(&frames.join("frame_002.png"));
    let mask = s(&frames.join("visibility_002.pfm"));
    let csv = dir.path().join("m.csv");
    ok(&["eval", "--pred", &img, "--gt", &other, "--mask", &mask, "--out", &s(&csv)]);
    let row = std::fs::read_to_string(&csv).unwrap();
    let psnr: f64 = row.lines().nth(1).unwrap().split(',').nth(4).unwrap().parse().unwrap();
    assert!(psnr > 0.0 && psnr < 99.0);
}

#[test]
fn pose_command_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("f");
    ok(&["synth", "--size", "32", "--out", &s(&frames)]);
    let out = dir.path().join("pose.json");
    ok(&[
        "pose",
        "--source",
        &s(&frames.join("frame_000.png")),
        "--target",
        &s(&frames.join("frame_002.png")),
        "--intrinsics",
        &s(&frames.join("poses.json")),
        "--iters-per-level",
        "30",
        "--out",
        &s(&out),
    ]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(v["pose"].as_array().unwrap().len(), 12);
    assert!(v["final_loss"].as_f64().unwrap() <= v["coarse_loss"].as_f64().unwrap());
    // the standard layout moves frame 2 along +x
    assert!(v["pose"][3].as_f64().unwrap() > 0.0);
}
