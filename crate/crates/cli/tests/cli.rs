use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dynslam::synth::{load_scene_spec, NoiseSpec, SceneSpec};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dynslam"))
}

fn spec_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("specs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn dynslam")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Standard spec shortened to `frames` frames.
fn short_spec(dir: &Path, frames: usize) -> PathBuf {
    let text = fs::read_to_string(spec_dir().join("standard.txt")).unwrap();
    let text = text.replace("Frames: 50", &format!("Frames: {frames}"));
    let path = dir.join("spec.txt");
    fs::write(&path, text).unwrap();
    path
}

fn metric(summary: &str, key: &str) -> f64 {
    let line = summary.lines().find(|l| l.starts_with(key)).unwrap();
    line[key.len()..].split_whitespace().next().unwrap().parse().unwrap()
}

#[test]
fn bundled_specs_match_the_builtin_scenes() {
    let standard = load_scene_spec(&spec_dir().join("standard.txt")).unwrap();
    assert_eq!(standard, SceneSpec::standard());
    let noisy = load_scene_spec(&spec_dir().join("noisy.txt")).unwrap();
    let mut expected = SceneSpec::standard();
    expected.noise = NoiseSpec {
        pixel_sigma: 0.5,
        depth_sigma: 0.01,
        outlier_fraction: 0.3,
    };
    assert_eq!(noisy, expected);
}

#[test]
fn synth_run_evaluate_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = short_spec(tmp.path(), 12);
    let seq = tmp.path().join("seq");
    let out = tmp.path().join("out");
    let eval = tmp.path().join("eval");

    let o = run(&["synth-gen", "--spec", s(&spec), "--out", s(&seq)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(seq.join("settings.txt").is_file());

    let settings = seq.join("settings.txt");
    let o = run(&["run", "--sequence", s(&seq), "--settings", s(&settings), "--out", s(&out), "--window", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(metric(&stdout, "camera RMSE:") < 1e-4, "{stdout}");
    for f in ["camera_trajectory.txt", "sparse_map.txt", "metrics_summary.txt", "object_labels.txt"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }

    let o = run(&["evaluate", "--est", s(&out), "--gt", s(&seq), "--out", s(&eval)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(eval.join("metrics_summary.txt")).unwrap();
    assert!(metric(&summary, "camera RMSE:") < 1e-4, "{summary}");
    assert!(metric(&summary, "object RMSE:") < 1e-4, "{summary}");
}

#[test]
fn no_global_still_writes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = short_spec(tmp.path(), 6);
    let seq = tmp.path().join("seq");
    let out = tmp.path().join("out");
    assert!(run(&["synth-gen", "--spec", s(&spec), "--out", s(&seq)]).status.success());
    let settings = seq.join("settings.txt");
    let o = run(&["run", "--sequence", s(&seq), "--settings", s(&settings), "--out", s(&out), "--no-global"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("camera_trajectory.txt").is_file());
    assert!(out.join("sparse_map.txt").is_file());
}

#[test]
fn missing_flow_fails_with_prefixed_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = short_spec(tmp.path(), 5);
    let seq = tmp.path().join("seq");
    assert!(run(&["synth-gen", "--spec", s(&spec), "--out", s(&seq)]).status.success());
    let flow = fs::read_dir(seq.join("flow"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.to_str().unwrap().contains("000003"))
        .expect("flow file of frame 3");
    fs::remove_file(flow).unwrap();
    let settings = seq.join("settings.txt");
    let o = run(&["run", "--sequence", s(&seq), "--settings", s(&settings), "--out", s(&tmp.path().join("out"))]);
    assert!(!o.status.success());
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.starts_with("dataio:") || err.starts_with("frontend:"), "{err}");
    assert!(err.contains('3'), "{err}");
}

#[test]
fn degenerate_spec_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("zero.txt");
    fs::write(&spec, "Frames: 0\n").unwrap();
    let o = run(&["synth-gen", "--spec", s(&spec), "--out", s(&tmp.path().join("seq"))]);
    assert!(!o.status.success());
    assert!(String::from_utf8(o.stderr).unwrap().starts_with("synth:"));
}

#[test]
fn missing_settings_file_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&[
        "run",
        "--sequence",
        s(tmp.path()),
        "--settings",
        s(&tmp.path().join("nope.txt")),
        "--out",
        s(&tmp.path().join("out")),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8(o.stderr).unwrap().starts_with("dataio:"));
}

#[test]
fn synth_gen_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = short_spec(tmp.path(), 3);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(run(&["synth-gen", "--spec", s(&spec), "--out", s(&a)]).status.success());
    assert!(run(&["synth-gen", "--spec", s(&spec), "--out", s(&b)]).status.success());
    let mut files: Vec<PathBuf> = walk(&a);
    files.sort();
    assert!(!files.is_empty());
    for f in files {
        let rel = f.strip_prefix(&a).unwrap();
        assert_eq!(fs::read(&f).unwrap(), fs::read(b.join(rel)).unwrap(), "{}", rel.display());
    }
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}
