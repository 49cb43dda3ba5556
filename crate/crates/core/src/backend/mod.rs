//! Motion-only BA, windowed static BA and the global factor graph.

pub(crate) mod schur;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use log::debug;
use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::dataio::Settings;
use crate::frontend::{FrameState, StepObservation};
use crate::geometry::{backproject, CameraIntrinsics, Pose};
use crate::metrics::object_speed;
use crate::solver::{
    lm_minimize, CameraReprojection, FixedPointReprojection, LeastSquaresProblem, LinearSolverKind, LmConfig,
    MotionSmoothness, ObjectReprojection, PointMotion, ResidualBlock, RobustKernel, SolveReport, SolverError,
    StereoReprojection, VarId,
};

#[derive(Debug, Error, PartialEq)]
pub enum BackendError {
    #[error("{unreached} of {total} vertices are not connected to the anchor")]
    DisconnectedGraph { unreached: usize, total: usize },
    #[error("window is empty")]
    EmptyWindow,
    #[error(transparent)]
    Solver(#[from] SolverError),
}

fn schur_config(settings: &Settings) -> LmConfig {
    LmConfig {
        linear_solver: LinearSolverKind::SchurPoints,
        ..LmConfig::from_params(&settings.lm)
    }
}

/// Refines `pose` against fixed world points.
pub fn motion_only_ba(
    pose: &Pose,
    pairs: &[(Vector3<f64>, Vector2<f64>)],
    k: &CameraIntrinsics,
    settings: &Settings,
) -> Result<(Pose, SolveReport), SolverError> {
    let kernel = RobustKernel::from_delta(settings.lm.huber_delta);
    let mut problem = LeastSquaresProblem::new();
    let x = problem.add_pose(*pose, false);
    for (w, uv) in pairs {
        problem.add_residual(Box::new(FixedPointReprojection::new(x, *w, *uv, *k, kernel)))?;
    }
    let report = lm_minimize(&mut problem, &LmConfig::from_params(&settings.lm))?;
    Ok((problem.pose(x), report))
}

fn step_point(pose_prev: &Pose, step: &StepObservation, k: &CameraIntrinsics) -> Vector3<f64> {
    pose_prev.transform_point(&backproject(&step.uv_prev, step.depth_prev, k).expect("positive depth"))
}

/// Static-only problem over a window of consecutive frames.
pub struct WindowProblem {
    pub problem: LeastSquaresProblem,
    /// (state index, camera variable); the first one is fixed.
    pub cameras: Vec<(usize, VarId)>,
    /// (state index of the frame the step ends in, track id, point variable).
    pub points: Vec<(usize, u64, VarId)>,
}

/// Builds the static problem over the last `window` states. Steps enter when
/// both of their frames lie inside the window.
pub fn build_window_problem(
    states: &[FrameState],
    window: usize,
    k: &CameraIntrinsics,
    settings: &Settings,
) -> Result<WindowProblem, BackendError> {
    if states.is_empty() || window == 0 {
        return Err(BackendError::EmptyWindow);
    }
    let start = states.len().saturating_sub(window);
    let kernel = RobustKernel::from_delta(settings.lm.huber_delta);
    let stereo = |cam, p, uv, d| {
        StereoReprojection::new(cam, p, uv, d, *k, kernel).with_disparity_weight(settings.disparity_weight)
    };
    let mut problem = LeastSquaresProblem::new();
    let cameras: Vec<(usize, VarId)> = (start..states.len())
        .map(|i| (i, problem.add_pose(states[i].camera_pose, i == start)))
        .collect();
    let var_of = |i: usize| cameras[i - start].1;
    let mut points = Vec::new();
    for i in start + 1..states.len() {
        let prev = &states[i - 1];
        for step in &states[i].static_steps {
            let p = problem.add_point(step_point(&prev.camera_pose, step, k), false);
            problem.add_residual(Box::new(stereo(var_of(i - 1), p, step.uv_prev, step.depth_prev)))?;
            match step.depth {
                Some(d) => problem.add_residual(Box::new(stereo(var_of(i), p, step.uv, d)))?,
                None => problem.add_residual(Box::new(CameraReprojection::new(var_of(i), p, step.uv, *k, kernel)))?,
            };
            points.push((i, step.track_id, p));
        }
    }
    Ok(WindowProblem { problem, cameras, points })
}

/// Jointly refines the poses of the last `window` frames and the static
/// points seen inside the window. The oldest pose is the local gauge. A
/// window of one frame falls back to motion-only BA against the previous
/// frame's points.
pub fn local_batch_optimize(
    states: &mut [FrameState],
    window: usize,
    k: &CameraIntrinsics,
    settings: &Settings,
) -> Result<Option<SolveReport>, BackendError> {
    let n = states.len();
    if window <= 1 {
        if n < 2 || states[n - 1].static_steps.is_empty() {
            return Ok(None);
        }
        let prev = states[n - 2].camera_pose;
        let pairs: Vec<(Vector3<f64>, Vector2<f64>)> =
            states[n - 1].static_steps.iter().map(|s| (step_point(&prev, s, k), s.uv)).collect();
        let (pose, report) = motion_only_ba(&states[n - 1].camera_pose, &pairs, k, settings)?;
        states[n - 1].camera_pose = pose;
        states[n - 1].refresh_world_points();
        return Ok(Some(report));
    }
    let mut wp = build_window_problem(states, window, k, settings)?;
    if wp.problem.num_residuals() == 0 {
        return Ok(None);
    }
    let report = lm_minimize(&mut wp.problem, &schur_config(settings))?;
    for &(i, v) in &wp.cameras[1..] {
        states[i].camera_pose = wp.problem.pose(v);
        states[i].refresh_world_points();
    }
    debug!("backend: window of {} frames, cost {:.3e} -> {:.3e}", wp.cameras.len(), report.initial_cost, report.final_cost);
    Ok(Some(report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Vertex {
    Camera { frame: usize },
    Motion { label: u32, frame: usize },
    StaticPoint { track: u64, frame: usize },
    DynamicPoint { label: u32, track: u64, frame: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FactorKind {
    CameraReprojection,
    StereoReprojection,
    ObjectReprojection,
    PointMotion,
    MotionSmoothness,
}

impl FactorKind {
    fn name(self) -> &'static str {
        match self {
            FactorKind::CameraReprojection => "camera_reprojection",
            FactorKind::StereoReprojection => "stereo_reprojection",
            FactorKind::ObjectReprojection => "object_reprojection",
            FactorKind::PointMotion => "point_motion",
            FactorKind::MotionSmoothness => "motion_smoothness",
        }
    }
}

/// Factor graph over cameras, object motions and points. Vertex ids are the
/// variable ids of the underlying least-squares problem.
pub struct FactorGraph {
    problem: LeastSquaresProblem,
    vertices: Vec<Vertex>,
    factors: Vec<(FactorKind, Vec<VarId>)>,
    anchor: Option<VarId>,
    cameras: BTreeMap<usize, VarId>,
    motions: BTreeMap<(u32, usize), VarId>,
    /// (motion, previous point, current point) of every point-motion factor.
    motion_links: Vec<(VarId, VarId, VarId)>,
}

impl Default for FactorGraph {
    fn default() -> Self {
        Self::new()
    }
}

impl FactorGraph {
    pub fn new() -> Self {
        Self {
            problem: LeastSquaresProblem::new(),
            vertices: Vec::new(),
            factors: Vec::new(),
            anchor: None,
            cameras: BTreeMap::new(),
            motions: BTreeMap::new(),
            motion_links: Vec::new(),
        }
    }

    pub fn add_camera(&mut self, frame: usize, pose: Pose) -> VarId {
        let v = self.problem.add_pose(pose, false);
        self.vertices.push(Vertex::Camera { frame });
        self.cameras.insert(frame, v);
        v
    }

    pub fn add_motion(&mut self, label: u32, frame: usize, motion: Pose) -> VarId {
        let v = self.problem.add_pose(motion, false);
        self.vertices.push(Vertex::Motion { label, frame });
        self.motions.insert((label, frame), v);
        v
    }

    pub fn add_point(&mut self, vertex: Vertex, p: Vector3<f64>) -> VarId {
        let v = self.problem.add_point(p, false);
        self.vertices.push(vertex);
        v
    }

    pub fn add_factor(&mut self, kind: FactorKind, block: Box<dyn ResidualBlock>) -> Result<(), SolverError> {
        let vars = block.variables().to_vec();
        self.problem.add_residual(block)?;
        if kind == FactorKind::PointMotion {
            self.motion_links.push((vars[0], vars[1], vars[2]));
        }
        self.factors.push((kind, vars));
        Ok(())
    }

    /// Holds the camera of `frame` fixed as the gauge.
    pub fn anchor_camera(&mut self, frame: usize) {
        if let Some(old) = self.anchor.take() {
            self.problem.set_fixed(old, false);
        }
        if let Some(&v) = self.cameras.get(&frame) {
            self.problem.set_fixed(v, true);
            self.anchor = Some(v);
        }
    }

    pub fn remove_anchor(&mut self) {
        if let Some(v) = self.anchor.take() {
            self.problem.set_fixed(v, false);
        }
    }

    pub fn anchor(&self) -> Option<VarId> {
        self.anchor
    }

    pub fn vertices(&self) -> &[Vertex] {
        &self.vertices
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn count_factors(&self, kind: FactorKind) -> usize {
        self.factors.iter().filter(|(k, _)| *k == kind).count()
    }

    pub fn num_motions(&self) -> usize {
        self.motions.len()
    }

    pub fn problem(&self) -> &LeastSquaresProblem {
        &self.problem
    }

    pub fn camera_poses(&self) -> BTreeMap<usize, Pose> {
        self.cameras.iter().map(|(&f, &v)| (f, self.problem.pose(v))).collect()
    }

    pub fn motions(&self) -> BTreeMap<(u32, usize), Pose> {
        self.motions.iter().map(|(&key, &v)| (key, self.problem.pose(v))).collect()
    }

    /// Fixes or frees the camera of `frame`.
    pub fn set_camera_fixed(&mut self, frame: usize, fixed: bool) {
        if let Some(&v) = self.cameras.get(&frame) {
            self.problem.set_fixed(v, fixed);
        }
    }

    /// Mean of `|P_k - O P_{k-1}|` over all point-motion links.
    pub fn point_motion_residual_mean(&self) -> f64 {
        if self.motion_links.is_empty() {
            return 0.0;
        }
        let total: f64 = self
            .motion_links
            .iter()
            .map(|&(o, a, b)| (self.problem.point(b) - self.problem.pose(o).transform_point(&self.problem.point(a))).norm())
            .sum();
        total / self.motion_links.len() as f64
    }

    /// Errors unless every vertex is reachable from the anchor.
    pub fn check_connected(&self) -> Result<(), BackendError> {
        let n = self.vertices.len();
        let Some(anchor) = self.anchor else {
            return Err(BackendError::DisconnectedGraph { unreached: n, total: n });
        };
        let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (f, (_, vars)) in self.factors.iter().enumerate() {
            for &v in vars {
                adjacency[v].push(f);
            }
        }
        let mut seen = vec![false; n];
        let mut used = vec![false; self.factors.len()];
        let mut queue = VecDeque::from([anchor]);
        seen[anchor] = true;
        while let Some(v) = queue.pop_front() {
            for &f in &adjacency[v] {
                if std::mem::replace(&mut used[f], true) {
                    continue;
                }
                for &u in &self.factors[f].1 {
                    if !seen[u] {
                        seen[u] = true;
                        queue.push_back(u);
                    }
                }
            }
        }
        let unreached = seen.iter().filter(|s| !**s).count();
        if unreached > 0 {
            return Err(BackendError::DisconnectedGraph { unreached, total: n });
        }
        Ok(())
    }

    /// One line per vertex and factor.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (id, v) in self.vertices.iter().enumerate() {
            let fixed = if self.problem.is_fixed(id) { " fixed" } else { "" };
            let _ = match v {
                Vertex::Camera { frame } => writeln!(s, "vertex {id} camera frame={frame}{fixed}"),
                Vertex::Motion { label, frame } => writeln!(s, "vertex {id} motion label={label} frame={frame}{fixed}"),
                Vertex::StaticPoint { track, frame } => writeln!(s, "vertex {id} static_point track={track} frame={frame}{fixed}"),
                Vertex::DynamicPoint { label, track, frame } => {
                    writeln!(s, "vertex {id} dynamic_point label={label} track={track} frame={frame}{fixed}")
                }
            };
        }
        for (kind, vars) in &self.factors {
            let ids: Vec<String> = vars.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "factor {} {}", kind.name(), ids.join(" "));
        }
        s
    }
}

/// Graph over every frame: static steps, dynamic steps with their object
/// motions, and optional smoothness between consecutive motions. The first
/// camera is the anchor.
pub fn build_global_graph(states: &[FrameState], k: &CameraIntrinsics, settings: &Settings) -> Result<FactorGraph, BackendError> {
    let kernel = RobustKernel::from_delta(settings.lm.huber_delta);
    let mut g = FactorGraph::new();
    let cams: Vec<VarId> = states.iter().map(|s| g.add_camera(s.index, s.camera_pose)).collect();
    if let Some(first) = states.first() {
        g.anchor_camera(first.index);
    }
    let observe = |g: &mut FactorGraph, cam: VarId, p: VarId, uv: Vector2<f64>, depth: Option<f64>| match depth {
        Some(d) => g.add_factor(FactorKind::StereoReprojection, Box::new(StereoReprojection::new(cam, p, uv, d, *k, kernel).with_disparity_weight(settings.disparity_weight))),
        None => g.add_factor(FactorKind::CameraReprojection, Box::new(CameraReprojection::new(cam, p, uv, *k, kernel))),
    };
    for i in 1..states.len() {
        let (prev, cur) = (&states[i - 1], &states[i]);
        for step in &cur.static_steps {
            let vertex = Vertex::StaticPoint { track: step.track_id, frame: prev.index };
            let p = g.add_point(vertex, step_point(&prev.camera_pose, step, k));
            observe(&mut g, cams[i - 1], p, step.uv_prev, Some(step.depth_prev))?;
            observe(&mut g, cams[i], p, step.uv, step.depth)?;
        }
        for (&label, obj) in &cur.objects {
            let o = g.add_motion(label, cur.index, obj.motion);
            for step in &obj.steps {
                let pp = step_point(&prev.camera_pose, step, k);
                let a = g.add_point(Vertex::DynamicPoint { label, track: step.track_id, frame: prev.index }, pp);
                let pc = match step.depth.and_then(|d| backproject(&step.uv, d, k).ok()) {
                    Some(c) => cur.camera_pose.transform_point(&c),
                    None => obj.motion.transform_point(&pp),
                };
                let b = g.add_point(Vertex::DynamicPoint { label, track: step.track_id, frame: cur.index }, pc);
                observe(&mut g, cams[i - 1], a, step.uv_prev, Some(step.depth_prev))?;
                g.add_factor(FactorKind::ObjectReprojection, Box::new(ObjectReprojection::new(cams[i], o, a, step.uv, *k, kernel)))?;
                observe(&mut g, cams[i], b, step.uv, step.depth)?;
                g.add_factor(FactorKind::PointMotion, Box::new(PointMotion::new(o, a, b, 1.0)))?;
            }
        }
    }
    if settings.smoothness_weight > 0.0 {
        let keys: Vec<(u32, usize)> = g.motions.keys().copied().collect();
        for w in keys.windows(2) {
            let ((la, fa), (lb, fb)) = (w[0], w[1]);
            if la == lb && fb == fa + 1 {
                let (a, b) = (g.motions[&w[0]], g.motions[&w[1]]);
                g.add_factor(FactorKind::MotionSmoothness, Box::new(MotionSmoothness::new(a, b, settings.smoothness_weight)))?;
            }
        }
    }
    Ok(g)
}

/// LM over every non-anchored vertex with point blocks eliminated.
pub fn global_batch_optimize(graph: &mut FactorGraph, settings: &Settings) -> Result<SolveReport, BackendError> {
    graph.check_connected()?;
    let report = lm_minimize(&mut graph.problem, &schur_config(settings))?;
    debug!(
        "backend: global graph {} vertices {} factors, cost {:.3e} -> {:.3e}",
        graph.num_vertices(),
        graph.num_factors(),
        report.initial_cost,
        report.final_cost
    );
    Ok(report)
}

/// Copies refined cameras and motions back into the frame states and
/// recomputes object speeds and centroids.
pub fn apply_global(graph: &FactorGraph, states: &mut [FrameState], fps: f64) {
    let cams = graph.camera_poses();
    let motions = graph.motions();
    let mut prev_points: BTreeMap<(u32, usize), Vec<Vector3<f64>>> = BTreeMap::new();
    let targets: BTreeSet<VarId> = graph.motion_links.iter().map(|l| l.1).collect();
    for (id, v) in graph.vertices.iter().enumerate() {
        if let Vertex::DynamicPoint { label, frame, .. } = v {
            if targets.contains(&id) {
                prev_points.entry((*label, *frame)).or_default().push(graph.problem.point(id));
            }
        }
    }
    for i in 0..states.len() {
        let prev_index = if i > 0 { Some(states[i - 1].index) } else { None };
        let s = &mut states[i];
        if let Some(p) = cams.get(&s.index) {
            s.camera_pose = *p;
        }
        for (&label, obj) in s.objects.iter_mut() {
            if let Some(m) = motions.get(&(label, s.index)) {
                obj.motion = *m;
            }
            if let Some(pts) = prev_index.and_then(|pi| prev_points.get(&(label, pi))) {
                obj.points_prev = pts.clone();
            }
            if !obj.points_prev.is_empty() {
                obj.centroid = obj.points_prev.iter().map(|p| obj.motion.transform_point(p)).sum::<Vector3<f64>>()
                    / obj.points_prev.len() as f64;
                obj.speed = object_speed(&obj.motion, &obj.points_prev, fps).unwrap_or(obj.speed);
            }
        }
        s.refresh_world_points();
    }
}

#[cfg(test)]
mod tests;
