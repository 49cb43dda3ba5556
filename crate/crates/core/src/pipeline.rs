//! Frame loop and the `run`, `evaluate` and `synth-gen` commands.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use nalgebra::Vector3;
use thiserror::Error;

use crate::backend::{apply_global, build_global_graph, global_batch_optimize, local_batch_optimize, BackendError};
use crate::dataio::{
    load_sequence, load_settings, parse_poses, write_text, DataError, FrameBundle, Settings, CAMERA_GT_FILE,
    OBJECT_GT_FILE, TIMES_FILE,
};
use crate::frontend::{FrameState, FrontendError, PointKind, Tracker};
use crate::geometry::Pose;
use crate::mapping::{
    cull_points, export_sparse_map, export_trajectories, insert_triangulated, ObjectTrackEntry, SparseMap,
    TrajectoryMap, TwoViewMatch, CAMERA_TRAJECTORY_FILE, OBJECT_MOTION_FILE, OBJECT_TRAJECTORY_FILE,
    SPARSE_MAP_FILE,
};
use crate::metrics::{
    aggregate, align_positions, object_speed, pose_error, speed_error, MetricsError, MetricsReport, SpeedRecord,
};
use crate::solver::SolveReport;
use crate::synth::{generate_scene, load_scene_spec, write_sequence, SynthError};

pub const OBJECT_LABELS_FILE: &str = "object_labels.txt";
pub const BOUNDING_BOX_FILE: &str = "bounding_boxes.csv";
pub const AGGREGATE_FILE: &str = "aggregate_summary.txt";
/// Smallest shared fraction of ground-truth frames accepted by `evaluate`.
pub const MIN_FRAME_OVERLAP: f64 = 0.5;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("dataio: {0}")]
    Data(#[from] DataError),
    #[error("frontend: frame {frame}: {source}")]
    Frontend { frame: usize, source: FrontendError },
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("synth: {0}")]
    Synth(#[from] SynthError),
    #[error("evaluate: estimate and ground truth share {shared} of {total} frames")]
    FrameMismatch { shared: usize, total: usize },
    #[error("evaluate: no trajectory found in {0}")]
    NoEstimate(PathBuf),
    #[error("evaluate: cannot determine the frame rate of {0}")]
    UnknownFrameRate(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub local_window: bool,
    /// Overrides the settings window size.
    pub window: Option<usize>,
    pub global: bool,
    pub smoothness_weight: Option<f64>,
    /// Overrides the RANSAC seed.
    pub seed: Option<u64>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            local_window: true,
            window: None,
            global: true,
            smoothness_weight: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub sequence: PathBuf,
    pub settings: PathBuf,
    pub out: PathBuf,
    pub options: RunOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundingBox {
    pub frame: usize,
    pub label: u32,
    pub min: (usize, usize),
    pub max: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub settings: Settings,
    pub states: Vec<FrameState>,
    pub map: SparseMap,
    pub trajectory: TrajectoryMap,
    /// Every LM solve of the run in execution order.
    pub reports: Vec<SolveReport>,
    pub global_report: Option<SolveReport>,
    /// Estimated label -> most frequent mask id.
    pub label_masks: BTreeMap<u32, u32>,
    pub boxes: Vec<BoundingBox>,
    pub metrics: Option<MetricsReport>,
    pub console: Vec<String>,
}

fn effective_settings(settings: &Settings, options: &RunOptions) -> Settings {
    let mut s = settings.clone();
    if let Some(w) = options.window {
        s.window_size = w;
    }
    if let Some(seed) = options.seed {
        s.ransac.seed = seed;
    }
    if let Some(w) = options.smoothness_weight {
        s.smoothness_weight = w;
    }
    s
}

fn console_line(state: &FrameState) -> String {
    let mut line = format!("frame {}: static inliers {}, objects {}", state.index, state.static_inliers, state.objects.len());
    for (label, o) in &state.objects {
        let _ = write!(line, ", {label}: {:.2} m/s", o.speed);
    }
    line
}

fn bounding_boxes(bundle: &FrameBundle, labels: &BTreeMap<u32, u32>) -> Vec<BoundingBox> {
    let mut boxes: BTreeMap<u32, ((usize, usize), (usize, usize))> = BTreeMap::new();
    let w = bundle.mask.width;
    for (i, &m) in bundle.mask.labels.iter().enumerate() {
        if m == 0 {
            continue;
        }
        let (x, y) = (i % w, i / w);
        let e = boxes.entry(m).or_insert(((x, y), (x, y)));
        e.0 = (e.0 .0.min(x), e.0 .1.min(y));
        e.1 = (e.1 .0.max(x), e.1 .1.max(y));
    }
    boxes
        .into_iter()
        .filter_map(|(m, (min, max))| {
            labels.get(&m).map(|&label| BoundingBox {
                frame: bundle.index,
                label,
                min,
                max,
            })
        })
        .collect()
}

/// Runs the full loop over in-memory frames.
pub fn run_frames(
    bundles: &[FrameBundle],
    settings: &Settings,
    options: &RunOptions,
    mut on_frame: impl FnMut(&str),
) -> Result<RunOutput, PipelineError> {
    let settings = effective_settings(settings, options);
    let k = settings.intrinsics;
    let mut tracker = Tracker::new(&settings);
    let mut states: Vec<FrameState> = Vec::with_capacity(bundles.len());
    let mut reports = Vec::new();
    let mut votes: BTreeMap<u32, BTreeMap<u32, usize>> = BTreeMap::new();
    let mut boxes = Vec::new();
    let mut console = Vec::new();
    let window = settings.window_size.max(1);

    for bundle in bundles {
        let init = bundle.gt_camera.unwrap_or_else(Pose::identity);
        let state = tracker.process(bundle, &init).map_err(|source| PipelineError::Frontend {
            frame: bundle.index,
            source,
        })?;
        reports.extend(state.reports.iter().cloned());
        for (&m, &l) in &state.labels {
            *votes.entry(l).or_default().entry(m).or_default() += 1;
        }
        boxes.extend(bounding_boxes(bundle, &state.labels));
        let line = console_line(&state);
        on_frame(&line);
        console.push(line);
        states.push(state);

        if options.local_window && window > 1 && states.len() >= window && states.len().is_multiple_of(window) {
            if let Some(r) = local_batch_optimize(&mut states, window, &k, &settings)? {
                reports.push(r);
            }
            let n = states.len();
            tracker.update_previous(states[n - 1].clone(), Some(states[n - 2].camera_pose));
        }
    }

    let mut global_report = None;
    if options.global && states.len() > 1 {
        let mut graph = build_global_graph(&states, &k, &settings)?;
        let report = global_batch_optimize(&mut graph, &settings)?;
        apply_global(&graph, &mut states, k.fps);
        info!("backend: global optimization {} iterations, cost {:.3e} -> {:.3e}", report.iterations, report.initial_cost, report.final_cost);
        reports.push(report.clone());
        global_report = Some(report);
    }

    let map = build_map(&states, &settings);
    let trajectory = build_trajectory(&states);
    let label_masks: BTreeMap<u32, u32> = votes
        .iter()
        .map(|(&l, per)| (l, *per.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).expect("non-empty").0))
        .collect();
    let metrics = run_metrics(bundles, &states, &label_masks, k.fps);
    Ok(RunOutput {
        settings,
        states,
        map,
        trajectory,
        reports,
        global_report,
        label_masks,
        boxes,
        metrics,
        console,
    })
}

/// Sparse map from the final states: close static points by back-projection,
/// far ones triangulated between their first frame and each keyframe.
pub fn build_map(states: &[FrameState], settings: &Settings) -> SparseMap {
    let k = settings.intrinsics;
    let poses: BTreeMap<usize, Pose> = states.iter().map(|s| (s.index, s.camera_pose)).collect();
    let interval = settings.keyframe_interval.max(1);
    let mut map = SparseMap::new();
    for s in states.iter().filter(|s| s.index % interval == 0) {
        map.add_keyframe(s.index, s.camera_pose);
        let mut far: BTreeMap<usize, Vec<TwoViewMatch>> = BTreeMap::new();
        for p in &s.static_points {
            if map.observe(p.track_id) {
                continue;
            }
            match p.kind {
                PointKind::Close => map.insert_close(p.track_id, p.p_world),
                PointKind::Far if p.origin.0 != s.index => far.entry(p.origin.0).or_default().push(TwoViewMatch {
                    id: p.track_id,
                    uv_a: p.origin.1,
                    uv_b: p.chain_uv,
                }),
                PointKind::Far => {}
            }
        }
        for (origin, matches) in far {
            if let Some(pose_a) = poses.get(&origin) {
                insert_triangulated(&mut map, &matches, (origin, pose_a), (s.index, &s.camera_pose), &k, &settings.gates);
            }
        }
        cull_points(&mut map);
    }
    map
}

pub fn build_trajectory(states: &[FrameState]) -> TrajectoryMap {
    let mut t = TrajectoryMap::new();
    for s in states {
        t.set_camera(s.index, s.camera_pose);
        for (&label, o) in &s.objects {
            t.set_object(
                label,
                s.index,
                ObjectTrackEntry {
                    centroid: o.centroid,
                    motion: o.motion,
                    speed: o.speed,
                },
            );
        }
    }
    t
}

/// Ground-truth motion of object `id` from frame `k-1` to `k`, world frame.
fn gt_motion(prev: &BTreeMap<u32, Pose>, cur: &BTreeMap<u32, Pose>, id: u32) -> Option<Pose> {
    Some(cur.get(&id)?.compose(&prev.get(&id)?.inverse()))
}

fn run_metrics(
    bundles: &[FrameBundle],
    states: &[FrameState],
    label_masks: &BTreeMap<u32, u32>,
    fps: f64,
) -> Option<MetricsReport> {
    if bundles.iter().any(|b| b.gt_camera.is_none()) {
        return None;
    }
    let mut report = MetricsReport::default();
    for (i, (b, s)) in bundles.iter().zip(states).enumerate() {
        report.camera.insert(s.index, pose_error(&s.camera_pose, &b.gt_camera?));
        if i == 0 {
            continue;
        }
        for (label, o) in &s.objects {
            let id = label_masks.get(label).copied().unwrap_or(*label);
            let Some(h) = gt_motion(&bundles[i - 1].gt_objects, &b.gt_objects, id) else { continue };
            report.objects.insert((s.index, id), pose_error(&o.motion, &h));
            if let Ok(v_gt) = object_speed(&h, &o.points_prev, fps) {
                report.speeds.push(SpeedRecord {
                    frame: s.index,
                    label: id,
                    v_est: o.speed,
                    v_gt,
                    error: speed_error(o.speed, v_gt),
                });
            }
        }
    }
    Some(report)
}

pub fn encode_label_masks(labels: &BTreeMap<u32, u32>) -> String {
    labels.iter().map(|(l, m)| format!("{l} {m}\n")).collect()
}

pub fn encode_boxes(boxes: &[BoundingBox]) -> String {
    let mut s = String::from("frame,label,min_u,min_v,max_u,max_v\n");
    for b in boxes {
        let _ = writeln!(s, "{},{},{},{},{},{}", b.frame, b.label, b.min.0, b.min.1, b.max.0, b.max.1);
    }
    s
}

/// Writes every artifact of a run into `dir`.
pub fn write_outputs(output: &RunOutput, dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    export_trajectories(&output.trajectory, dir)?;
    export_sparse_map(&output.map, &dir.join(SPARSE_MAP_FILE))?;
    write_text(&dir.join(OBJECT_LABELS_FILE), &encode_label_masks(&output.label_masks))?;
    write_text(&dir.join(BOUNDING_BOX_FILE), &encode_boxes(&output.boxes))?;
    if let Some(m) = &output.metrics {
        m.write(dir)?;
    }
    Ok(())
}

/// Loads a sequence, runs it and writes the outputs.
pub fn run_pipeline(config: &RunConfig, on_frame: impl FnMut(&str)) -> Result<RunOutput, PipelineError> {
    let settings = load_settings(&config.settings)?;
    for w in &settings.warnings {
        warn!("dataio: {w}");
    }
    let bundles = load_sequence(&config.sequence, &settings)?;
    let output = run_frames(&bundles, &settings, &config.options, on_frame)?;
    write_outputs(&output, &config.out)?;
    Ok(output)
}

fn read_labels(path: &Path) -> Result<BTreeMap<u32, u32>, PipelineError> {
    if !path.is_file() {
        return Ok(BTreeMap::new());
    }
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        let parsed = (f.len() == 2).then(|| Some((f[0].parse().ok()?, f[1].parse().ok()?))).flatten();
        let (l, m) = parsed.ok_or_else(|| DataError::Parse {
            path: path.to_path_buf(),
            what: format!("line {}", i + 1),
        })?;
        out.insert(l, m);
    }
    Ok(out)
}

fn read_object_rows(path: &Path) -> Result<BTreeMap<(usize, u32), Vector3<f64>>, PipelineError> {
    let mut out = BTreeMap::new();
    if !path.is_file() {
        return Ok(out);
    }
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    for (i, line) in text.lines().enumerate() {
        let f: Vec<f64> = line.split_whitespace().filter_map(|t| t.parse().ok()).collect();
        if f.len() != 6 {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                what: format!("line {}", i + 1),
            }
            .into());
        }
        out.insert((f[0] as usize, f[1] as u32), Vector3::new(f[2], f[3], f[4]));
    }
    Ok(out)
}

/// Frame rate from `times.txt`, falling back to `settings.txt`.
fn frame_rate(gt: &Path) -> Result<f64, PipelineError> {
    let times = gt.join(TIMES_FILE);
    if let Ok(text) = fs::read_to_string(&times) {
        let t: Vec<f64> = text.split_whitespace().filter_map(|v| v.parse().ok()).collect();
        let mut d: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > 0.0).collect();
        if !d.is_empty() {
            d.sort_by(f64::total_cmp);
            return Ok(1.0 / d[d.len() / 2]);
        }
    }
    let settings = gt.join(crate::synth::SETTINGS_FILE);
    if settings.is_file() {
        return Ok(load_settings(&settings)?.intrinsics.fps);
    }
    Err(PipelineError::UnknownFrameRate(gt.to_path_buf()))
}

/// Compares exported trajectories in `est` against ground truth in `gt`.
pub fn evaluate_run(est: &Path, gt: &Path, align: bool) -> Result<MetricsReport, PipelineError> {
    let est_cam: BTreeMap<usize, Pose> =
        parse_poses(&est.join(CAMERA_TRAJECTORY_FILE))?.into_iter().map(|r| (r.frame, r.pose)).collect();
    let gt_cam: BTreeMap<usize, Pose> = parse_poses(&gt.join(CAMERA_GT_FILE))?.into_iter().map(|r| (r.frame, r.pose)).collect();
    let shared: Vec<usize> = est_cam.keys().filter(|f| gt_cam.contains_key(f)).copied().collect();
    let total = gt_cam.len().max(est_cam.len());
    if total == 0 || (shared.len() as f64) < MIN_FRAME_OVERLAP * total as f64 {
        return Err(PipelineError::FrameMismatch { shared: shared.len(), total });
    }
    if shared.len() < total {
        warn!("evaluate: evaluating {} shared frames of {total}", shared.len());
    }
    let transform = if align {
        let a: Vec<Vector3<f64>> = shared.iter().map(|f| est_cam[f].translation).collect();
        let b: Vec<Vector3<f64>> = shared.iter().map(|f| gt_cam[f].translation).collect();
        align_positions(&a, &b)?
    } else {
        Pose::identity()
    };

    let fps = frame_rate(gt)?;
    let labels = read_labels(&est.join(OBJECT_LABELS_FILE))?;
    let centroids = read_object_rows(&est.join(OBJECT_TRAJECTORY_FILE))?;
    let mut gt_obj: BTreeMap<usize, BTreeMap<u32, Pose>> = BTreeMap::new();
    let gt_obj_path = gt.join(OBJECT_GT_FILE);
    if gt_obj_path.is_file() {
        for r in parse_poses(&gt_obj_path)? {
            gt_obj.entry(r.frame).or_default().insert(r.object.unwrap_or(0), r.pose);
        }
    }
    let motions_path = est.join(OBJECT_MOTION_FILE);
    let motions = if motions_path.is_file() { parse_poses(&motions_path)? } else { Vec::new() };

    let mut report = MetricsReport::default();
    let shared_set: BTreeSet<usize> = shared.iter().copied().collect();
    for f in &shared {
        report.camera.insert(*f, pose_error(&transform.compose(&est_cam[f]), &gt_cam[f]));
    }
    let empty = BTreeMap::new();
    for r in motions {
        let Some(label) = r.object else { continue };
        if !shared_set.contains(&r.frame) || r.frame == 0 {
            continue;
        }
        let id = labels.get(&label).copied().unwrap_or(label);
        let prev = gt_obj.get(&(r.frame - 1)).unwrap_or(&empty);
        let cur = gt_obj.get(&r.frame).unwrap_or(&empty);
        let Some(h) = gt_motion(prev, cur, id) else { continue };
        let o = transform.compose(&r.pose).compose(&transform.inverse());
        report.objects.insert((r.frame, id), pose_error(&o, &h));
        if let Some(c) = centroids.get(&(r.frame, label)) {
            let c_prev = r.pose.inverse().transform_point(c);
            let c_prev = transform.transform_point(&c_prev);
            let v_est = (o.transform_point(&c_prev) - c_prev).norm() * fps;
            let v_gt = (h.transform_point(&c_prev) - c_prev).norm() * fps;
            report.speeds.push(SpeedRecord {
                frame: r.frame,
                label: id,
                v_est,
                v_gt,
                error: speed_error(v_est, v_gt),
            });
        }
    }
    Ok(report)
}

/// Run directories below `est`: `est` itself when it holds a trajectory,
/// otherwise every subdirectory that does, in name order.
pub fn find_runs(est: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    if est.join(CAMERA_TRAJECTORY_FILE).is_file() {
        return Ok(vec![est.to_path_buf()]);
    }
    let entries = fs::read_dir(est).map_err(|source| DataError::Io {
        path: est.to_path_buf(),
        source,
    })?;
    let mut runs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(CAMERA_TRAJECTORY_FILE).is_file())
        .collect();
    runs.sort();
    if runs.is_empty() {
        return Err(PipelineError::NoEstimate(est.to_path_buf()));
    }
    Ok(runs)
}

/// Evaluates one run or every run below `est`, writing per-run metrics and,
/// for several runs, an aggregate summary.
pub fn evaluate(est: &Path, gt: &Path, out: &Path, align: bool) -> Result<Vec<MetricsReport>, PipelineError> {
    let runs = find_runs(est)?;
    let mut reports = Vec::new();
    for run in &runs {
        let report = evaluate_run(run, gt, align)?;
        let dir = if runs.len() == 1 {
            out.to_path_buf()
        } else {
            out.join(run.file_name().unwrap_or_default())
        };
        report.write(&dir)?;
        reports.push(report);
    }
    if runs.len() > 1 {
        write_text(&out.join(AGGREGATE_FILE), &aggregate(&reports).summary())?;
    }
    Ok(reports)
}

/// Generates a synthetic sequence from a spec file.
pub fn synth_gen(spec: &Path, out: &Path) -> Result<(), PipelineError> {
    let spec = load_scene_spec(spec)?;
    let scene = generate_scene(&spec)?;
    write_sequence(&scene, out)?;
    Ok(())
}
