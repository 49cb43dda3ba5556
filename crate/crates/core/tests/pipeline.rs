use std::fs;

use dynslam::dataio::{parse_poses, DepthFormat};
use dynslam::mapping::{parse_sparse_map, CAMERA_TRAJECTORY_FILE, SPARSE_MAP_FILE};
use dynslam::metrics::aggregate;
use dynslam::pipeline::{evaluate, run_frames, run_pipeline, RunConfig, RunOptions, AGGREGATE_FILE};
use dynslam::synth::{generate_scene, write_sequence, SceneSpec};

fn short(frames: usize) -> SceneSpec {
    let mut spec = SceneSpec::standard();
    spec.frames = frames;
    spec
}

#[test]
fn directory_run_matches_standalone_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    let mut spec = short(10);
    spec.depth_format = DepthFormat::Pgm16;
    let scene = generate_scene(&spec).unwrap();
    let seq = tmp.path().join("seq");
    write_sequence(&scene, &seq).unwrap();
    let out = tmp.path().join("out");
    let config = RunConfig {
        sequence: seq.clone(),
        settings: seq.join("settings.txt"),
        out: out.clone(),
        options: RunOptions::default(),
    };
    let output = run_pipeline(&config, |_| {}).unwrap();
    let run_metrics = output.metrics.expect("ground truth present");
    let cam = run_metrics.camera_rmse().unwrap();
    // 16-bit depth quantization limits accuracy to millimeters
    assert!(cam.translational < 0.01, "{cam:?}");

    let trajectory = parse_poses(&out.join(CAMERA_TRAJECTORY_FILE)).unwrap();
    assert_eq!(trajectory.len(), 10);
    let map_text = fs::read_to_string(out.join(SPARSE_MAP_FILE)).unwrap();
    let points = parse_sparse_map(&out.join(SPARSE_MAP_FILE), &map_text).unwrap();
    assert_eq!(points.len(), output.map.len());

    let eval = tmp.path().join("eval");
    let reports = evaluate(&out, &seq, &eval, false).unwrap();
    assert_eq!(reports.len(), 1);
    let standalone = reports[0].camera_rmse().unwrap();
    assert!((standalone.translational - cam.translational).abs() < 1e-6);
    assert!((standalone.rotational - cam.rotational).abs() < 1e-6);

    let runs = tmp.path().join("runs");
    for name in ["r1", "r2"] {
        fs::create_dir_all(runs.join(name)).unwrap();
        for entry in fs::read_dir(&out).unwrap() {
            let path = entry.unwrap().path();
            fs::copy(&path, runs.join(name).join(path.file_name().unwrap())).unwrap();
        }
    }
    let both = evaluate(&runs, &seq, &tmp.path().join("eval2"), false).unwrap();
    assert_eq!(both.len(), 2);
    let agg = aggregate(&both);
    assert_eq!(agg.runs, 2);
    assert!((agg.camera.unwrap().translational - standalone.translational).abs() < 1e-12);
    assert!(tmp.path().join("eval2").join(AGGREGATE_FILE).is_file());
}

#[test]
fn global_tier_can_be_skipped() {
    let scene = generate_scene(&short(8)).unwrap();
    let opts = RunOptions {
        global: false,
        ..Default::default()
    };
    let out = run_frames(&scene.frames, &scene.settings, &opts, |_| {}).unwrap();
    assert!(out.global_report.is_none());
    assert_eq!(out.states.len(), 8);
    assert!(!out.map.is_empty());
    assert!(out.metrics.unwrap().camera_rmse().unwrap().translational < 1e-4);
}

#[test]
fn frontend_only_run_stays_accurate() {
    let scene = generate_scene(&short(8)).unwrap();
    let opts = RunOptions {
        global: false,
        local_window: false,
        ..Default::default()
    };
    let out = run_frames(&scene.frames, &scene.settings, &opts, |_| {}).unwrap();
    let m = out.metrics.unwrap();
    assert!(m.camera_rmse().unwrap().translational < 1e-4);
    assert!(m.object_rmse().unwrap().translational < 1e-4);
}

#[test]
fn smoothness_term_keeps_noise_free_solution() {
    let scene = generate_scene(&short(12)).unwrap();
    let opts = RunOptions {
        smoothness_weight: Some(1.0),
        window: Some(4),
        ..Default::default()
    };
    let out = run_frames(&scene.frames, &scene.settings, &opts, |_| {}).unwrap();
    assert!(out.global_report.as_ref().unwrap().is_monotone());
    let m = out.metrics.unwrap();
    assert!(m.camera_rmse().unwrap().translational < 1e-4);
    assert!(m.object_rmse().unwrap().translational < 1e-3);
}

#[test]
fn per_frame_callback_sees_every_frame() {
    let scene = generate_scene(&short(5)).unwrap();
    let mut lines = Vec::new();
    run_frames(&scene.frames, &scene.settings, &RunOptions::default(), |l| lines.push(l.to_string())).unwrap();
    assert!(lines.len() >= 5);
}
