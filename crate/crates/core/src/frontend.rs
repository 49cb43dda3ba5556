//! Per-frame tracking: point sampling, flow tracking, camera pose and object
//! motion estimation, scene-flow classification and label propagation.

use std::collections::{BTreeMap, BTreeSet};

use log::{debug, warn};
use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::dataio::{DepthMap, FlowField, FrameBundle, MaskGrid, ObjectDecisionRule, Settings};
use crate::geometry::{backproject, project, CameraIntrinsics, Pose};
use crate::metrics::object_speed;
use crate::solver::{
    lm_minimize, ransac_pnp, FixedPointReprojection, LeastSquaresProblem, LmConfig, ObjectReprojection, PnpParams,
    RobustKernel, SolveReport, SolverError,
};

/// Smallest correspondence count for a 6-DoF solve.
pub const MIN_SUPPORT: usize = 6;

#[derive(Debug, Error, PartialEq)]
pub enum FrontendError {
    #[error("{found} correspondences, need at least {needed}")]
    InsufficientCorrespondences { found: usize, needed: usize },
    #[error("no pose model reached minimal consensus")]
    DegenerateGeometry,
    #[error("object motion did not converge (mean reprojection error {mean_error:.3} px)")]
    ConvergenceFailure { mean_error: f64 },
    #[error("frame {0} has no flow from the previous frame")]
    MissingFlow(usize),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PointKind {
    Close,
    Far,
}

/// Close iff `depth` is below 40 baselines, capped by the label's depth threshold.
pub fn classify_close_far(depth: f64, label: u32, settings: &Settings) -> PointKind {
    if depth < settings.close_depth_bound(label) {
        PointKind::Close
    } else {
        PointKind::Far
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackedPoint {
    pub track_id: u64,
    /// Integer pixel in the frame the point was created in.
    pub uv: Vector2<f64>,
    pub depth: f64,
    pub p_cam: Vector3<f64>,
    pub p_world: Vector3<f64>,
    /// Effective label: 0 for background and for objects judged static.
    pub label: u32,
    /// Persistent object label, 0 for background.
    pub object: u32,
    pub kind: PointKind,
    pub inlier: bool,
    /// Frame and pixel where the track started.
    pub origin: (usize, Vector2<f64>),
    /// Sub-pixel track position following the flow without snapping.
    pub chain_uv: Vector2<f64>,
}

impl TrackedPoint {
    fn new(frame: usize, x: usize, y: usize, depth: f64, label: u32, pose: &Pose, k: &CameraIntrinsics, settings: &Settings) -> Self {
        let uv = Vector2::new(x as f64, y as f64);
        let p_cam = backproject(&uv, depth, k).expect("positive depth");
        Self {
            track_id: 0,
            uv,
            depth,
            p_cam,
            p_world: pose.transform_point(&p_cam),
            label,
            object: label,
            kind: classify_close_far(depth, label, settings),
            inlier: true,
            origin: (frame, uv),
            chain_uv: uv,
        }
    }
}

fn inverse_depth(depth: &DepthMap) -> Vec<f64> {
    depth.values.iter().map(|&d| if d > 0.0 && d.is_finite() { 1.0 / d as f64 } else { 0.0 }).collect()
}

/// Valid, continuous 3x3 neighbourhood around an interior pixel.
fn smooth_patch(inv: &[f64], w: usize, h: usize, x: usize, y: usize) -> bool {
    if x == 0 || y == 0 || x + 1 >= w || y + 1 >= h {
        return false;
    }
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for yy in y - 1..=y + 1 {
        for xx in x - 1..=x + 1 {
            let v = inv[yy * w + xx];
            if v <= 0.0 {
                return false;
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    hi <= lo * crate::dataio::DEPTH_CONTINUITY_RATIO
}

/// Minimum eigenvalue of the inverse-depth structure tensor over a 3x3 window.
fn corner_response(inv: &[f64], w: usize, h: usize, x: usize, y: usize) -> f64 {
    if x < 2 || y < 2 || x + 2 >= w || y + 2 >= h {
        return 0.0;
    }
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for yy in y - 1..=y + 1 {
        for xx in x - 1..=x + 1 {
            let n = [inv[yy * w + xx - 1], inv[yy * w + xx + 1], inv[(yy - 1) * w + xx], inv[(yy + 1) * w + xx]];
            if n.iter().any(|&v| v <= 0.0) {
                return 0.0;
            }
            let gx = (n[1] - n[0]) / 2.0;
            let gy = (n[3] - n[2]) / 2.0;
            a += gx * gx;
            b += gx * gy;
            c += gy * gy;
        }
    }
    let tr = a + c;
    let det = a * c - b * b;
    (tr / 2.0 - ((tr * tr / 4.0 - det).max(0.0)).sqrt()).max(0.0)
}

/// Responses below this count as flat.
const FLAT_RESPONSE: f64 = 1e-12;

/// Cell size of the static detection grid.
pub fn static_cell_size(width: usize, height: usize, settings: &Settings) -> usize {
    let adaptive = ((width * height) as f64 / settings.max_static_points.max(1) as f64).sqrt().ceil() as usize;
    settings.grid_step.max(adaptive).max(1)
}

/// Static corner candidates outside every mask, one per free grid cell.
///
/// Each cell keeps its strongest inverse-depth corner; cells on planar
/// surfaces fall back to a jittered pixel near the cell centre. Cells that
/// contain one of `occupied` are skipped.
pub fn detect_static_candidates(
    bundle: &FrameBundle,
    pose: &Pose,
    k: &CameraIntrinsics,
    settings: &Settings,
    occupied: &[Vector2<f64>],
) -> Vec<TrackedPoint> {
    let (w, h) = bundle.resolution();
    let cell = static_cell_size(w, h, settings);
    let (cw, ch) = (w.div_ceil(cell), h.div_ceil(cell));
    let mut taken = vec![false; cw * ch];
    for uv in occupied {
        let (x, y) = (uv.x.round(), uv.y.round());
        if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
            taken[(y as usize / cell) * cw + x as usize / cell] = true;
        }
    }
    let inv = inverse_depth(&bundle.depth);
    let usable = |x: usize, y: usize| bundle.mask.at(x, y) == 0 && smooth_patch(&inv, w, h, x, y);
    let mut out = Vec::new();
    for cy in 0..ch {
        for cx in 0..cw {
            if taken[cy * cw + cx] {
                continue;
            }
            let (x0, y0) = (cx * cell, cy * cell);
            let (x1, y1) = ((x0 + cell).min(w), (y0 + cell).min(h));
            let mut best: Option<(f64, usize, usize)> = None;
            for y in y0..y1 {
                for x in x0..x1 {
                    let r = corner_response(&inv, w, h, x, y);
                    if r > FLAT_RESPONSE && best.is_none_or(|b| r > b.0) && usable(x, y) {
                        best = Some((r, x, y));
                    }
                }
            }
            let pick = match best {
                Some((_, x, y)) => Some((x, y)),
                None => {
                    let hash = (cx as u64).wrapping_mul(73_856_093) ^ (cy as u64).wrapping_mul(19_349_663);
                    let span = (cell / 2).max(1) as u64;
                    let jx = (x0 + (cell / 4) + (hash % span) as usize).min(x1 - 1);
                    let jy = (y0 + (cell / 4) + ((hash / span) % span) as usize).min(y1 - 1);
                    if usable(jx, jy) {
                        Some((jx, jy))
                    } else {
                        (y0..y1).flat_map(|y| (x0..x1).map(move |x| (x, y))).find(|&(x, y)| usable(x, y))
                    }
                }
            };
            if let Some((x, y)) = pick {
                let d = bundle.depth.at(x, y).expect("usable pixels have depth");
                out.push(TrackedPoint::new(bundle.index, x, y, d, 0, pose, k, settings));
            }
        }
    }
    if out.len() + occupied.len() > settings.max_static_points {
        let keep = settings.max_static_points.saturating_sub(occupied.len());
        let n = out.len();
        out = (0..keep).map(|i| out[i * n / keep.max(1)].clone()).collect();
    }
    out
}

/// Grid samples (step `grid_step`) inside object masks with depth below the
/// object depth threshold. Labels are the raw mask ids.
pub fn sample_object_points(bundle: &FrameBundle, pose: &Pose, k: &CameraIntrinsics, settings: &Settings) -> Vec<TrackedPoint> {
    sample_object_points_except(bundle, pose, k, settings, &[])
}

fn sample_object_points_except(
    bundle: &FrameBundle,
    pose: &Pose,
    k: &CameraIntrinsics,
    settings: &Settings,
    occupied: &[Vector2<f64>],
) -> Vec<TrackedPoint> {
    let (w, h) = bundle.resolution();
    let step = settings.grid_step.max(1);
    let (cw, ch) = (w.div_ceil(step), h.div_ceil(step));
    let mut taken = vec![false; cw * ch];
    for uv in occupied {
        let (x, y) = ((uv.x / step as f64).round(), (uv.y / step as f64).round());
        if x >= 0.0 && y >= 0.0 && (x as usize) < cw && (y as usize) < ch {
            taken[y as usize * cw + x as usize] = true;
        }
    }
    let mut out = Vec::new();
    for gy in 0..ch {
        for gx in 0..cw {
            let (x, y) = (gx * step, gy * step);
            let label = bundle.mask.at(x, y);
            if label == 0 || taken[gy * cw + gx] {
                continue;
            }
            let Some(d) = bundle.depth.at(x, y) else { continue };
            if d >= settings.th_depth_obj {
                continue;
            }
            out.push(TrackedPoint::new(bundle.index, x, y, d, label, pose, k, settings));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correspondence {
    /// Index into the tracked point list.
    pub index: usize,
    pub uv_prev: Vector2<f64>,
    pub uv: Vector2<f64>,
    /// Depth sampled at `uv` in the current frame.
    pub depth: f64,
    /// The four depth pixels around `uv` lie on one plane.
    pub planar: bool,
}

/// Relative tolerance on the affine consistency of inverse depth.
const PLANAR_TOLERANCE: f64 = 1e-3;

/// Whether inverse depth is affine over the 4x4 block around `uv`.
pub fn is_planar_cell(depth: &DepthMap, uv: &Vector2<f64>) -> bool {
    let (x0, y0) = (uv.x.floor() as usize, uv.y.floor() as usize);
    if x0 == 0 || y0 == 0 || x0 + 2 >= depth.width || y0 + 2 >= depth.height {
        return false;
    }
    let mut inv = [[0.0; 4]; 4];
    for (j, row) in inv.iter_mut().enumerate() {
        for (i, v) in row.iter_mut().enumerate() {
            match depth.at(x0 + i - 1, y0 + j - 1) {
                Some(d) => *v = 1.0 / d,
                None => return false,
            }
        }
    }
    let tol = PLANAR_TOLERANCE * inv[1][1];
    (0..4).all(|a| {
        (1..3).all(|b| {
            (inv[a][b - 1] - 2.0 * inv[a][b] + inv[a][b + 1]).abs() <= tol
                && (inv[b - 1][a] - 2.0 * inv[b][a] + inv[b + 1][a]).abs() <= tol
        })
    })
}

/// Largest relative gap between a landing depth and its prediction.
const LANDING_DEPTH_TOLERANCE: f64 = 0.05;

/// Depth measured at a landing when it is planar and agrees with the
/// predicted camera-frame point; occluders and creases give `None`.
fn landing_depth(c: &Correspondence, predicted: &Vector3<f64>) -> Option<f64> {
    (c.planar && (c.depth - predicted.z).abs() <= LANDING_DEPTH_TOLERANCE * predicted.z).then_some(c.depth)
}

/// Moves every point by the flow at its pixel; drops points that leave the
/// image or land on invalid depth.
pub fn track_via_flow(points: &[TrackedPoint], flow: &FlowField, depth: &DepthMap) -> Vec<Correspondence> {
    let (w, h) = (flow.width as f64, flow.height as f64);
    points
        .iter()
        .enumerate()
        .filter_map(|(index, p)| {
            let f = flow.sample(&p.uv)?;
            let uv = p.uv + f;
            if !(uv.x >= 0.0 && uv.y >= 0.0 && uv.x <= w - 1.0 && uv.y <= h - 1.0) {
                return None;
            }
            let d = depth.sample(&uv)?;
            Some(Correspondence {
                index,
                uv_prev: p.uv,
                uv,
                depth: d,
                planar: is_planar_cell(depth, &uv),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoseModel {
    Prior,
    Ransac,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoseBranches {
    pub prior: bool,
    pub ransac: bool,
}

impl Default for PoseBranches {
    fn default() -> Self {
        Self { prior: true, ransac: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraEstimate {
    pub pose: Pose,
    pub inliers: Vec<bool>,
    pub num_inliers: usize,
    pub model: PoseModel,
    pub prior_inliers: usize,
    pub ransac_inliers: Option<usize>,
    pub report: SolveReport,
}

fn reprojection_errors(pose: &Pose, corrs: &[(Vector3<f64>, Vector2<f64>)], k: &CameraIntrinsics) -> Vec<f64> {
    let inv = pose.inverse();
    corrs
        .iter()
        .map(|(w, uv)| project(&inv.transform_point(w), k).map(|p| (p - uv).norm()).unwrap_or(f64::INFINITY))
        .collect()
}

fn inlier_mask(errors: &[f64], threshold: f64) -> (Vec<bool>, usize) {
    let mask: Vec<bool> = errors.iter().map(|&e| e < threshold).collect();
    let n = mask.iter().filter(|&&m| m).count();
    (mask, n)
}

/// Constant-velocity prediction `X_{k-1} (X_{k-2}^-1 X_{k-1})`.
pub fn constant_motion_prior(prev: &Pose, prev_prev: Option<&Pose>) -> Pose {
    match prev_prev {
        Some(pp) => prev.compose(&pp.inverse().compose(prev)),
        None => *prev,
    }
}

/// Camera pose from world points of frame k-1 and their pixels in frame k.
pub fn estimate_camera_pose(
    corrs: &[(Vector3<f64>, Vector2<f64>)],
    prior: &Pose,
    previous: &Pose,
    k: &CameraIntrinsics,
    settings: &Settings,
) -> Result<CameraEstimate, FrontendError> {
    estimate_camera_pose_with(corrs, prior, previous, k, settings, PoseBranches::default())
}

/// As [`estimate_camera_pose`] with either initialization branch switchable.
pub fn estimate_camera_pose_with(
    corrs: &[(Vector3<f64>, Vector2<f64>)],
    prior: &Pose,
    previous: &Pose,
    k: &CameraIntrinsics,
    settings: &Settings,
    branches: PoseBranches,
) -> Result<CameraEstimate, FrontendError> {
    if corrs.len() < MIN_SUPPORT {
        return Err(FrontendError::InsufficientCorrespondences {
            found: corrs.len(),
            needed: MIN_SUPPORT,
        });
    }
    let thr = settings.ransac.pixel_threshold;
    let (prior_mask, prior_inliers) = if branches.prior {
        inlier_mask(&reprojection_errors(prior, corrs, k), thr)
    } else {
        (vec![false; corrs.len()], 0)
    };
    let ransac = if branches.ransac {
        let mut params = PnpParams::new(settings.ransac.iterations, thr, settings.ransac.seed);
        params.initial = *previous;
        params.min_inliers = MIN_SUPPORT;
        match ransac_pnp(corrs, k, &params) {
            Ok(r) => Some(r),
            Err(SolverError::NoConsensus(_)) => None,
            Err(e) => return Err(e.into()),
        }
    } else {
        None
    };
    let ransac_inliers = ransac.as_ref().map(|r| r.num_inliers);
    let (seed, mask, model) = match ransac {
        Some(r) if r.num_inliers > prior_inliers => (r.pose, r.inliers, PoseModel::Ransac),
        _ if prior_inliers >= MIN_SUPPORT => (*prior, prior_mask, PoseModel::Prior),
        _ => return Err(FrontendError::DegenerateGeometry),
    };

    let kernel = RobustKernel::from_delta(settings.lm.huber_delta);
    let mut problem = LeastSquaresProblem::new();
    let x = problem.add_pose(seed, false);
    for ((w, uv), _) in corrs.iter().zip(&mask).filter(|(_, m)| **m) {
        problem.add_residual(Box::new(FixedPointReprojection::new(x, *w, *uv, *k, kernel)))?;
    }
    let report = lm_minimize(&mut problem, &LmConfig::from_params(&settings.lm))?;
    let pose = problem.pose(x);
    let (inliers, num_inliers) = inlier_mask(&reprojection_errors(&pose, corrs, k), thr);
    Ok(CameraEstimate {
        pose,
        inliers,
        num_inliers,
        model,
        prior_inliers,
        ransac_inliers,
        report,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneFlowVector {
    pub track_id: u64,
    pub vector: Vector3<f64>,
}

/// World displacement of a point not explained by the camera motion.
pub fn compute_scene_flow(p_prev_world: &Vector3<f64>, p_cur_cam: &Vector3<f64>, x_k: &Pose) -> Vector3<f64> {
    x_k.transform_point(p_cur_cam) - p_prev_world
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectState {
    Static,
    Dynamic,
}

/// Decides static/dynamic per label from its points' scene flow.
pub fn classify_objects(flows: &BTreeMap<u32, Vec<Vector3<f64>>>, settings: &Settings) -> BTreeMap<u32, ObjectState> {
    flows
        .iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|(&label, v)| {
            let thr = settings.scene_flow_threshold;
            let dynamic = match settings.object_rule {
                ObjectDecisionRule::Fraction => {
                    let moving = v.iter().filter(|f| f.norm() > thr).count();
                    moving as f64 / v.len() as f64 > settings.dynamic_ratio
                }
                ObjectDecisionRule::MeanMagnitude => v.iter().map(|f| f.norm()).sum::<f64>() / v.len() as f64 > thr,
            };
            (label, if dynamic { ObjectState::Dynamic } else { ObjectState::Static })
        })
        .collect()
}

/// Associates current mask instances with persistent labels.
///
/// `votes` holds `(previous label, current mask id)` for every tracked
/// object point. Each mask instance takes the previous label owning most of
/// its incoming points (ties to the smaller label); a label claimed by two
/// instances stays with the one with more votes. Instances left without a
/// label get `max_label + 1, ...` in mask-id order. Returns the mapping and
/// the new largest label.
pub fn propagate_labels(votes: &[(u32, u32)], mask_ids: &[u32], max_label: u32) -> (BTreeMap<u32, u32>, u32) {
    let mut counts: BTreeMap<u32, BTreeMap<u32, usize>> = BTreeMap::new();
    for &(label, mask) in votes {
        if label > 0 && mask > 0 {
            *counts.entry(mask).or_default().entry(label).or_default() += 1;
        }
    }
    // (votes, mask, label) candidates, strongest first
    let mut claims: Vec<(usize, u32, u32)> = Vec::new();
    for (&mask, per_label) in &counts {
        if !mask_ids.contains(&mask) {
            continue;
        }
        let (&label, &n) = per_label
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .expect("non-empty");
        claims.push((n, mask, label));
    }
    claims.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut out = BTreeMap::new();
    let mut used = BTreeSet::new();
    for (_, mask, label) in claims {
        if used.insert(label) {
            out.insert(mask, label);
        }
    }
    let mut next = max_label;
    for &mask in mask_ids {
        if mask > 0 && !out.contains_key(&mask) {
            next += 1;
            out.insert(mask, next);
        }
    }
    (out, next.max(max_label))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectEstimate {
    pub motion: Pose,
    pub inliers: Vec<bool>,
    pub num_inliers: usize,
    pub reports: Vec<SolveReport>,
}

fn solve_object_motion(
    corrs: &[(Vector3<f64>, Vector2<f64>)],
    use_: &[bool],
    init: Pose,
    x_k: &Pose,
    k: &CameraIntrinsics,
    settings: &Settings,
) -> Result<(Pose, SolveReport), FrontendError> {
    let kernel = RobustKernel::from_delta(settings.lm.huber_delta);
    let mut problem = LeastSquaresProblem::new();
    let cam = problem.add_pose(*x_k, true);
    let motion = problem.add_pose(init, false);
    for ((p, uv), _) in corrs.iter().zip(use_).filter(|(_, u)| **u) {
        let point = problem.add_point(*p, true);
        problem.add_residual(Box::new(ObjectReprojection::new(cam, motion, point, *uv, *k, kernel)))?;
    }
    let report = lm_minimize(&mut problem, &LmConfig::from_params(&settings.lm))?;
    Ok((problem.pose(motion), report))
}

/// Object motion `O` from points at k-1 and their pixels at k, with `X_k` fixed.
///
/// LM starts at identity; a second pass refits on the points whose
/// reprojection error is below the pixel threshold.
pub fn estimate_object_motion(
    corrs: &[(Vector3<f64>, Vector2<f64>)],
    x_k: &Pose,
    k: &CameraIntrinsics,
    settings: &Settings,
) -> Result<ObjectEstimate, FrontendError> {
    if corrs.len() < MIN_SUPPORT {
        return Err(FrontendError::InsufficientCorrespondences {
            found: corrs.len(),
            needed: MIN_SUPPORT,
        });
    }
    let thr = settings.ransac.pixel_threshold;
    let all = vec![true; corrs.len()];
    let (first, r1) = solve_object_motion(corrs, &all, Pose::identity(), x_k, k, settings)?;
    let moved = |o: &Pose| -> Vec<(Vector3<f64>, Vector2<f64>)> {
        corrs.iter().map(|(p, uv)| (o.transform_point(p), *uv)).collect()
    };
    let (mask, n) = inlier_mask(&reprojection_errors(x_k, &moved(&first), k), thr);
    let mut reports = vec![r1];
    let mut motion = first;
    if n >= MIN_SUPPORT && n < corrs.len() {
        let (second, r2) = solve_object_motion(corrs, &mask, first, x_k, k, settings)?;
        motion = second;
        reports.push(r2);
    }
    let errors = reprojection_errors(x_k, &moved(&motion), k);
    let (inliers, num_inliers) = inlier_mask(&errors, thr);
    let last = reports.last().expect("one report");
    if num_inliers < MIN_SUPPORT || !last.converged {
        let used: Vec<f64> = errors.iter().zip(&inliers).filter(|(_, m)| **m).map(|(e, _)| *e).collect();
        let mean_error = if used.is_empty() {
            f64::INFINITY
        } else {
            used.iter().sum::<f64>() / used.len() as f64
        };
        if num_inliers < MIN_SUPPORT || mean_error > 2.0 * thr {
            return Err(FrontendError::ConvergenceFailure { mean_error });
        }
    }
    Ok(ObjectEstimate {
        motion,
        inliers,
        num_inliers,
        reports,
    })
}

/// A point seen in two consecutive frames: created at an integer pixel with
/// measured depth in frame k-1, observed at `uv` in frame k.
#[derive(Debug, Clone, PartialEq)]
pub struct StepObservation {
    pub track_id: u64,
    pub uv_prev: Vector2<f64>,
    pub depth_prev: f64,
    pub uv: Vector2<f64>,
    /// Depth sampled at `uv`, when valid.
    pub depth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectFrame {
    pub motion: Pose,
    /// Inlier steps used for the motion.
    pub steps: Vec<StepObservation>,
    /// Inlier points at k-1 in world coordinates.
    pub points_prev: Vec<Vector3<f64>>,
    /// Mean of the inlier points moved to frame k.
    pub centroid: Vector3<f64>,
    pub speed: f64,
    /// Mask id the label was associated with in this frame.
    pub mask_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameState {
    pub index: usize,
    pub camera_pose: Pose,
    /// Label -> motion from the previous frame, dynamic objects only.
    pub objects: BTreeMap<u32, ObjectFrame>,
    /// Static/dynamic decision per label observed with enough support.
    pub decisions: BTreeMap<u32, ObjectState>,
    /// Current mask id -> persistent label.
    pub labels: BTreeMap<u32, u32>,
    /// Points created in this frame, carried to the next.
    pub static_points: Vec<TrackedPoint>,
    pub dynamic_points: Vec<TrackedPoint>,
    /// Static inlier steps from the previous frame into this one.
    pub static_steps: Vec<StepObservation>,
    pub static_inliers: usize,
    pub camera_model: Option<PoseModel>,
    /// Every LM solve of this frame.
    pub reports: Vec<SolveReport>,
}

impl FrameState {
    pub fn object_motions(&self) -> BTreeMap<u32, Pose> {
        self.objects.iter().map(|(&l, o)| (l, o.motion)).collect()
    }

    /// Recomputes world positions of the frame's points from `camera_pose`.
    pub fn refresh_world_points(&mut self) {
        let x = self.camera_pose;
        for p in self.static_points.iter_mut().chain(self.dynamic_points.iter_mut()) {
            p.p_world = x.transform_point(&p.p_cam);
        }
    }
}

/// Sequential tracker holding the previous frame.
pub struct Tracker {
    settings: Settings,
    k: CameraIntrinsics,
    prev: Option<FrameState>,
    prev_prev_pose: Option<Pose>,
    next_track: u64,
    max_label: u32,
    /// Motion-only refinement applied after the camera estimate.
    refine: bool,
}

impl Tracker {
    pub fn new(settings: &Settings) -> Self {
        Self {
            settings: settings.clone(),
            k: settings.intrinsics,
            prev: None,
            prev_prev_pose: None,
            next_track: 1,
            max_label: 0,
            refine: true,
        }
    }

    pub fn set_motion_only_refinement(&mut self, on: bool) {
        self.refine = on;
    }

    pub fn previous(&self) -> Option<&FrameState> {
        self.prev.as_ref()
    }

    /// Replaces the stored previous frame (e.g. after back-end refinement).
    pub fn update_previous(&mut self, state: FrameState, prev_prev_pose: Option<Pose>) {
        self.prev = Some(state);
        if prev_prev_pose.is_some() {
            self.prev_prev_pose = prev_prev_pose;
        }
    }

    fn assign_ids(&mut self, points: &mut [TrackedPoint]) {
        for p in points {
            if p.track_id == 0 {
                p.track_id = self.next_track;
                self.next_track += 1;
            }
        }
    }

    /// Processes one frame. `initial_pose` is used for the first frame only.
    pub fn process(&mut self, bundle: &FrameBundle, initial_pose: &Pose) -> Result<FrameState, FrontendError> {
        let state = match self.prev.take() {
            None => self.first_frame(bundle, initial_pose),
            Some(prev) => {
                let result = self.next_frame(bundle, &prev);
                let prev_pose = prev.camera_pose;
                match result {
                    Ok(s) => {
                        self.prev_prev_pose = Some(prev_pose);
                        s
                    }
                    Err(e) => {
                        self.prev = Some(prev);
                        return Err(e);
                    }
                }
            }
        };
        self.prev = Some(state.clone());
        Ok(state)
    }

    fn first_frame(&mut self, bundle: &FrameBundle, pose: &Pose) -> FrameState {
        let (labels, max) = propagate_labels(&[], &bundle.mask.instance_ids(), self.max_label);
        self.max_label = max;
        let mut static_points = detect_static_candidates(bundle, pose, &self.k, &self.settings, &[]);
        let mut dynamic_points = sample_object_points(bundle, pose, &self.k, &self.settings);
        relabel(&mut dynamic_points, &labels, &BTreeMap::new());
        self.assign_ids(&mut static_points);
        self.assign_ids(&mut dynamic_points);
        FrameState {
            index: bundle.index,
            camera_pose: *pose,
            objects: BTreeMap::new(),
            decisions: BTreeMap::new(),
            labels,
            static_points,
            dynamic_points,
            static_steps: Vec::new(),
            static_inliers: 0,
            camera_model: None,
            reports: Vec::new(),
        }
    }

    fn next_frame(&mut self, bundle: &FrameBundle, prev: &FrameState) -> Result<FrameState, FrontendError> {
        let settings = &self.settings;
        let k = self.k;
        let flow = bundle.flow_from_prev.as_ref().ok_or(FrontendError::MissingFlow(bundle.index))?;
        let mut reports = Vec::new();

        // camera
        let static_corrs = track_via_flow(&prev.static_points, flow, &bundle.depth);
        let close: Vec<&Correspondence> = static_corrs
            .iter()
            .filter(|c| prev.static_points[c.index].kind == PointKind::Close)
            .collect();
        let used: Vec<&Correspondence> = if close.len() >= MIN_SUPPORT {
            close
        } else {
            static_corrs.iter().collect()
        };
        let pairs: Vec<(Vector3<f64>, Vector2<f64>)> =
            used.iter().map(|c| (prev.static_points[c.index].p_world, c.uv)).collect();
        let prior = constant_motion_prior(&prev.camera_pose, self.prev_prev_pose.as_ref());
        let est = estimate_camera_pose(&pairs, &prior, &prev.camera_pose, &k, settings)?;
        reports.push(est.report.clone());
        let mut x_k = est.pose;
        let inlier_pairs: Vec<(Vector3<f64>, Vector2<f64>)> =
            pairs.iter().zip(&est.inliers).filter(|(_, m)| **m).map(|(p, _)| *p).collect();
        if self.refine {
            let (refined, report) = crate::backend::motion_only_ba(&x_k, &inlier_pairs, &k, settings)?;
            x_k = refined;
            reports.push(report);
        }
        let static_steps: Vec<StepObservation> = used
            .iter()
            .zip(&est.inliers)
            .filter(|(_, m)| **m)
            .map(|(c, _)| {
                let p = &prev.static_points[c.index];
                StepObservation {
                    track_id: p.track_id,
                    uv_prev: p.uv,
                    depth_prev: p.depth,
                    uv: c.uv,
                    depth: landing_depth(c, &x_k.inverse().transform_point(&p.p_world)),
                }
            })
            .collect();
        let inlier_tracks: BTreeSet<usize> = used
            .iter()
            .zip(&est.inliers)
            .filter(|(_, m)| **m)
            .map(|(c, _)| c.index)
            .collect();

        // labels
        let object_corrs = track_via_flow(&prev.dynamic_points, flow, &bundle.depth);
        let landing_mask: Vec<u32> = object_corrs
            .iter()
            .map(|c| bundle.mask.at_subpixel(&c.uv).unwrap_or(0))
            .collect();
        let votes: Vec<(u32, u32)> = object_corrs
            .iter()
            .zip(&landing_mask)
            .map(|(c, &m)| (prev.dynamic_points[c.index].object, m))
            .collect();
        let (labels, max) = propagate_labels(&votes, &bundle.mask.instance_ids(), self.max_label);
        self.max_label = max;

        // scene flow on points that stay on their own instance
        let mut per_label: BTreeMap<u32, Vec<(&Correspondence, Vector3<f64>)>> = BTreeMap::new();
        for (c, &m) in object_corrs.iter().zip(&landing_mask) {
            let p = &prev.dynamic_points[c.index];
            if m == 0 || labels.get(&m) != Some(&p.object) {
                continue;
            }
            let cur = backproject(&c.uv, c.depth, &k).expect("sampled depth is positive");
            per_label
                .entry(p.object)
                .or_default()
                .push((c, compute_scene_flow(&p.p_world, &cur, &x_k)));
        }
        let flows: BTreeMap<u32, Vec<Vector3<f64>>> = per_label
            .iter()
            .filter(|(_, v)| v.len() >= MIN_SUPPORT)
            .map(|(&l, v)| (l, v.iter().map(|(_, f)| *f).collect()))
            .collect();
        let decisions = classify_objects(&flows, settings);

        // object motions
        let mut objects = BTreeMap::new();
        for (&label, state) in &decisions {
            if *state != ObjectState::Dynamic {
                continue;
            }
            let corrs: Vec<&Correspondence> = per_label[&label]
                .iter()
                .map(|(c, _)| *c)
                .filter(|c| prev.dynamic_points[c.index].kind == PointKind::Close)
                .collect();
            let pairs: Vec<(Vector3<f64>, Vector2<f64>)> =
                corrs.iter().map(|c| (prev.dynamic_points[c.index].p_world, c.uv)).collect();
            match estimate_object_motion(&pairs, &x_k, &k, settings) {
                Ok(o) => {
                    reports.extend(o.reports.iter().cloned());
                    let mut steps = Vec::new();
                    let mut points_prev = Vec::new();
                    for ((c, (p, _)), _) in corrs.iter().zip(&pairs).zip(&o.inliers).filter(|(_, m)| **m) {
                        let tp = &prev.dynamic_points[c.index];
                        steps.push(StepObservation {
                            track_id: tp.track_id,
                            uv_prev: tp.uv,
                            depth_prev: tp.depth,
                            uv: c.uv,
                            depth: landing_depth(c, &x_k.inverse().transform_point(&o.motion.transform_point(p))),
                        });
                        points_prev.push(*p);
                    }
                    let centroid = points_prev.iter().map(|p| o.motion.transform_point(p)).sum::<Vector3<f64>>()
                        / points_prev.len() as f64;
                    let speed = object_speed(&o.motion, &points_prev, k.fps).unwrap_or(0.0);
                    let mask_id = labels.iter().find(|(_, &l)| l == label).map(|(&m, _)| m).unwrap_or(0);
                    objects.insert(
                        label,
                        ObjectFrame {
                            motion: o.motion,
                            steps,
                            points_prev,
                            centroid,
                            speed,
                            mask_id,
                        },
                    );
                }
                Err(e) => warn!("frontend: frame {} object {label}: {e}", bundle.index),
            }
        }

        // carry tracks, then fill free cells
        let mut static_points = Vec::new();
        let mut taken: BTreeSet<(usize, usize)> = BTreeSet::new();
        for c in &static_corrs {
            if !inlier_tracks.contains(&c.index) {
                continue;
            }
            let p = &prev.static_points[c.index];
            if let Some(mut q) = self.snap(bundle, &x_k, c, 0, &mut taken) {
                q.track_id = p.track_id;
                q.origin = p.origin;
                q.chain_uv = chain(p, flow);
                static_points.push(q);
            }
        }
        let occupied: Vec<Vector2<f64>> = static_points.iter().map(|p| p.uv).collect();
        static_points.extend(detect_static_candidates(bundle, &x_k, &k, settings, &occupied));

        let mut dynamic_points = Vec::new();
        for (c, &m) in object_corrs.iter().zip(&landing_mask) {
            let p = &prev.dynamic_points[c.index];
            if m == 0 || labels.get(&m) != Some(&p.object) {
                continue;
            }
            if let Some(mut q) = self.snap(bundle, &x_k, c, m, &mut taken) {
                if q.depth >= settings.th_depth_obj {
                    continue;
                }
                q.track_id = p.track_id;
                q.origin = p.origin;
                q.chain_uv = chain(p, flow);
                q.object = p.object;
                dynamic_points.push(q);
            }
        }
        let occupied: Vec<Vector2<f64>> = dynamic_points.iter().map(|p| p.uv).collect();
        let mut fresh = sample_object_points_except(bundle, &x_k, &k, settings, &occupied);
        relabel(&mut fresh, &labels, &decisions);
        for p in &mut dynamic_points {
            p.label = if decisions.get(&p.object) == Some(&ObjectState::Static) { 0 } else { p.object };
        }
        dynamic_points.extend(fresh);
        self.assign_ids(&mut static_points);
        self.assign_ids(&mut dynamic_points);

        debug!(
            "frontend: frame {} static {}/{} objects {}",
            bundle.index,
            est.num_inliers,
            pairs.len(),
            objects.len()
        );
        Ok(FrameState {
            index: bundle.index,
            camera_pose: x_k,
            objects,
            decisions,
            labels,
            static_points,
            dynamic_points,
            static_steps,
            static_inliers: est.num_inliers,
            camera_model: Some(est.model),
            reports,
        })
    }

    /// New point at the pixel nearest a landing, if it shows the same instance.
    fn snap(
        &self,
        bundle: &FrameBundle,
        pose: &Pose,
        c: &Correspondence,
        mask_id: u32,
        taken: &mut BTreeSet<(usize, usize)>,
    ) -> Option<TrackedPoint> {
        let (x, y) = (c.uv.x.round() as usize, c.uv.y.round() as usize);
        if bundle.mask.at(x, y) != mask_id || !taken.insert((x, y)) {
            return None;
        }
        let d = bundle.depth.at(x, y)?;
        let mut p = TrackedPoint::new(bundle.index, x, y, d, mask_id, pose, &self.k, &self.settings);
        p.label = 0;
        p.object = 0;
        p.kind = classify_close_far(d, if mask_id == 0 { 0 } else { 1 }, &self.settings);
        Some(p)
    }
}

fn chain(p: &TrackedPoint, flow: &FlowField) -> Vector2<f64> {
    flow.sample(&p.chain_uv).map(|f| p.chain_uv + f).unwrap_or(p.chain_uv)
}

/// Maps raw mask ids on freshly sampled points to persistent labels.
fn relabel(points: &mut [TrackedPoint], labels: &BTreeMap<u32, u32>, decisions: &BTreeMap<u32, ObjectState>) {
    for p in points {
        let l = labels.get(&p.object).copied().unwrap_or(p.object);
        p.object = l;
        p.label = if decisions.get(&l) == Some(&ObjectState::Static) { 0 } else { l };
    }
}

/// Mask value at the pixel nearest `uv`, 0 outside.
pub fn mask_label(mask: &MaskGrid, uv: &Vector2<f64>) -> u32 {
    mask.at_subpixel(uv).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::se3_exp;
    use crate::geometry::test_support::random_twist;
    use crate::synth::{generate_scene, SceneSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn settings() -> Settings {
        SceneSpec::standard().settings()
    }

    fn blank(w: usize, h: usize) -> FrameBundle {
        let mut depth = DepthMap::new(w, h);
        depth.values.iter_mut().for_each(|d| *d = 10.0);
        FrameBundle {
            index: 0,
            timestamp: 0.0,
            depth,
            mask: MaskGrid::new(w, h),
            flow_from_prev: None,
            gt_camera: None,
            gt_objects: BTreeMap::new(),
        }
    }

    #[test]
    fn close_far_rule() {
        let mut s = settings();
        s.th_depth = 100.0;
        s.th_depth_obj = 100.0;
        assert_eq!(classify_close_far(19.0, 0, &s), PointKind::Close);
        assert_eq!(classify_close_far(21.0, 0, &s), PointKind::Far);
        s.th_depth_obj = 10.0;
        assert_eq!(classify_close_far(12.0, 2, &s), PointKind::Far);
        assert_eq!(classify_close_far(12.0, 0, &s), PointKind::Close);
    }

    #[test]
    fn fully_masked_frame_has_no_static_candidates() {
        let mut b = blank(64, 48);
        b.mask.labels.iter_mut().for_each(|l| *l = 1);
        assert!(detect_static_candidates(&b, &Pose::identity(), &settings().intrinsics, &settings(), &[]).is_empty());
    }

    #[test]
    fn static_candidates_avoid_masks() {
        let scene = generate_scene(&SceneSpec::standard()).unwrap();
        let s = &scene.settings;
        for b in scene.frames.iter().step_by(10) {
            let pts = detect_static_candidates(b, &Pose::identity(), &s.intrinsics, s, &[]);
            assert!(pts.len() > 200);
            assert!(pts.len() <= s.max_static_points);
            for p in &pts {
                assert_eq!(mask_label(&b.mask, &p.uv), 0);
                assert!(p.depth > 0.0 && p.label == 0);
            }
        }
    }

    #[test]
    fn object_grid_counting() {
        let mut b = blank(40, 40);
        for y in 0..10 {
            for x in 0..10 {
                b.mask.labels[y * 40 + x] = 3;
            }
        }
        let mut s = settings();
        s.grid_step = 5;
        let pts = sample_object_points(&b, &Pose::identity(), &s.intrinsics, &s);
        assert_eq!(pts.len(), 4);
        assert!(pts.iter().all(|p| p.label == 3 && p.depth < s.th_depth_obj));
        let empty = blank(40, 40);
        assert!(sample_object_points(&empty, &Pose::identity(), &s.intrinsics, &s).is_empty());
    }

    #[test]
    fn uniform_flow_shifts_points() {
        let b = blank(64, 48);
        let s = settings();
        let pts = sample_object_points(&{
            let mut m = b.clone();
            m.mask.labels.iter_mut().for_each(|l| *l = 1);
            m
        }, &Pose::identity(), &s.intrinsics, &s);
        let zero = FlowField::zeros(64, 48);
        for c in track_via_flow(&pts, &zero, &b.depth) {
            assert_eq!(c.uv, c.uv_prev);
        }
        let mut shift = FlowField::zeros(64, 48);
        shift.data.iter_mut().for_each(|f| *f = [3.0, -2.0]);
        let corrs = track_via_flow(&pts, &shift, &b.depth);
        assert!(!corrs.is_empty());
        for c in &corrs {
            assert_eq!(c.uv - c.uv_prev, Vector2::new(3.0, -2.0));
        }
        assert!(corrs.len() < pts.len());
    }

    #[test]
    fn flow_landings_match_projections() {
        let scene = generate_scene(&SceneSpec::standard()).unwrap();
        let s = &scene.settings;
        let k = s.intrinsics;
        let b0 = &scene.frames[0];
        let b1 = &scene.frames[1];
        let pts = detect_static_candidates(b0, &scene.camera_poses[0], &k, s, &[]);
        let corrs = track_via_flow(&pts, b1.flow_from_prev.as_ref().unwrap(), &b1.depth);
        assert!(corrs.len() > 100);
        for c in corrs {
            let w = pts[c.index].p_world;
            let uv = project(&scene.camera_poses[1].inverse().transform_point(&w), &k).unwrap();
            assert!((uv - c.uv).norm() < 0.5);
        }
    }

    fn pose_problem(rng: &mut ChaCha8Rng, truth: &Pose, n: usize, outliers: f64) -> Vec<(Vector3<f64>, Vector2<f64>)> {
        let k = settings().intrinsics;
        (0..n)
            .map(|_| {
                let z = rng.gen_range(4.0..18.0);
                let c = Vector3::new(rng.gen_range(-0.8..0.8) * z, rng.gen_range(-0.25..0.25) * z, z);
                let mut uv = project(&c, &k).unwrap();
                if rng.gen_bool(outliers) {
                    uv = Vector2::new(rng.gen_range(0.0..640.0), rng.gen_range(0.0..200.0));
                }
                (truth.transform_point(&c), uv)
            })
            .collect()
    }

    #[test]
    fn stationary_camera_keeps_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = se3_exp(&random_twist(&mut rng, 0.3, 2.0));
        let corrs = pose_problem(&mut rng, &x, 50, 0.0);
        let s = settings();
        let est = estimate_camera_pose(&corrs, &x, &x, &s.intrinsics, &s).unwrap();
        assert!((est.pose.translation - x.translation).norm() < 1e-6);
        assert!(est.pose.compose(&x.inverse()).rotation_angle() < 1e-6);
    }

    #[test]
    fn outliers_flagged_and_pose_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let prev = se3_exp(&random_twist(&mut rng, 0.3, 2.0));
        let truth = prev.compose(&se3_exp(&random_twist(&mut rng, 0.05, 0.5)));
        let corrs = pose_problem(&mut rng, &truth, 200, 0.3);
        let s = settings();
        let est = estimate_camera_pose(&corrs, &prev, &prev, &s.intrinsics, &s).unwrap();
        assert!((est.pose.translation - truth.translation).norm() < 1e-3);
        assert!(est.num_inliers >= est.prior_inliers.max(est.ransac_inliers.unwrap_or(0)) - 2);
        for ((w, uv), m) in corrs.iter().zip(&est.inliers) {
            let e = (project(&truth.inverse().transform_point(w), &s.intrinsics).unwrap() - uv).norm();
            if e > 5.0 {
                assert!(!m);
            }
        }
    }

    #[test]
    fn each_branch_alone_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prev = se3_exp(&random_twist(&mut rng, 0.3, 2.0));
        let step = se3_exp(&random_twist(&mut rng, 0.01, 0.3));
        let truth = prev.compose(&step);
        let prior = truth.compose(&se3_exp(&random_twist(&mut rng, 0.002, 0.01)));
        let corrs = pose_problem(&mut rng, &truth, 60, 0.0);
        let s = settings();
        for branches in [PoseBranches { prior: true, ransac: false }, PoseBranches { prior: false, ransac: true }] {
            let est = estimate_camera_pose_with(&corrs, &prior, &prev, &s.intrinsics, &s, branches).unwrap();
            assert!((est.pose.translation - truth.translation).norm() < 1e-6, "{branches:?}");
        }
        let both = estimate_camera_pose(&corrs, &prior, &prev, &s.intrinsics, &s).unwrap();
        let chosen = match both.model {
            PoseModel::Prior => both.prior_inliers,
            PoseModel::Ransac => both.ransac_inliers.unwrap(),
        };
        assert!(chosen >= both.prior_inliers.max(both.ransac_inliers.unwrap_or(0)));
        assert_eq!(
            estimate_camera_pose(&corrs[..5], &prior, &prev, &s.intrinsics, &s),
            Err(FrontendError::InsufficientCorrespondences { found: 5, needed: 6 })
        );
    }

    #[test]
    fn scene_flow_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = se3_exp(&random_twist(&mut rng, 0.3, 2.0));
        let w = Vector3::new(1.0, 2.0, 9.0);
        let cam = x.inverse().transform_point(&w);
        assert!(compute_scene_flow(&w, &cam, &x).norm() < 1e-9);
        let moved = x.inverse().transform_point(&(w + Vector3::x()));
        assert!((compute_scene_flow(&w, &moved, &x) - Vector3::x()).norm() < 1e-9);
    }

    #[test]
    fn classification_rules() {
        let s = settings();
        let mut flows = BTreeMap::new();
        flows.insert(1, vec![Vector3::zeros(); 10]);
        flows.insert(2, vec![Vector3::new(0.5, 0.0, 0.0); 10]);
        flows.insert(3, vec![Vector3::new(0.12, 0.0, 0.0); 10]);
        let d = classify_objects(&flows, &s);
        assert_eq!(d[&1], ObjectState::Static);
        assert_eq!(d[&2], ObjectState::Dynamic);
        assert_eq!(d[&3], ObjectState::Static);
    }

    #[test]
    fn label_propagation() {
        let (m, max) = propagate_labels(&[(1, 5), (1, 5), (2, 5), (2, 7)], &[5, 7], 2);
        assert_eq!(m[&5], 1);
        assert_eq!(m[&7], 2);
        assert_eq!(max, 2);
        let (m, max) = propagate_labels(&[(1, 5)], &[5, 9], 4);
        assert_eq!(m[&5], 1);
        assert_eq!(m[&9], 5);
        assert_eq!(max, 5);
        let (m, _) = propagate_labels(&[], &[2, 3], 0);
        assert_eq!((m[&2], m[&3]), (1, 2));
    }

    #[test]
    fn renumbered_masks_keep_labels() {
        // the same two objects appear with swapped mask ids
        let votes: Vec<(u32, u32)> = (0..30).map(|i| if i < 20 { (1, 8) } else { (2, 4) }).collect();
        let (m, _) = propagate_labels(&votes, &[4, 8], 2);
        assert_eq!(m[&8], 1);
        assert_eq!(m[&4], 2);
    }

    #[test]
    fn object_motion_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = settings();
        let k = s.intrinsics;
        let x = se3_exp(&random_twist(&mut rng, 0.1, 1.0));
        let o = Pose::from_translation(Vector3::new(0.5, 0.0, 0.0));
        let pts: Vec<Vector3<f64>> = (0..40)
            .map(|_| x.transform_point(&Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-0.5..0.5), rng.gen_range(8.0..10.0))))
            .collect();
        let corrs: Vec<(Vector3<f64>, Vector2<f64>)> = pts
            .iter()
            .map(|p| (*p, project(&x.inverse().transform_point(&o.transform_point(p)), &k).unwrap()))
            .collect();
        let est = estimate_object_motion(&corrs, &x, &k, &s).unwrap();
        assert!((est.motion.translation - o.translation).norm() < 1e-4);
        for p in &pts {
            assert!((est.motion.transform_point(p) - o.transform_point(p)).norm() < 1e-4);
        }
        let still: Vec<(Vector3<f64>, Vector2<f64>)> =
            pts.iter().map(|p| (*p, project(&x.inverse().transform_point(p), &k).unwrap())).collect();
        let est = estimate_object_motion(&still, &x, &k, &s).unwrap();
        assert!(est.motion.translation.norm() < 1e-6 && est.motion.rotation_angle() < 1e-6);
    }

    #[test]
    fn static_scene_flow_vanishes_on_synth() {
        let scene = generate_scene(&SceneSpec::standard()).unwrap();
        let s = &scene.settings;
        let k = s.intrinsics;
        let pts = detect_static_candidates(&scene.frames[0], &scene.camera_poses[0], &k, s, &[]);
        let b1 = &scene.frames[1];
        let corrs = track_via_flow(&pts, b1.flow_from_prev.as_ref().unwrap(), &b1.depth);
        let mut small = 0;
        let corrs: Vec<_> = corrs.into_iter().filter(|c| c.planar).collect();
        assert!(corrs.len() > 150, "{}", corrs.len());
        for c in &corrs {
            if mask_label(&b1.mask, &c.uv) != 0 {
                continue;
            }
            let cur = backproject(&c.uv, c.depth, &k).unwrap();
            let f = compute_scene_flow(&pts[c.index].p_world, &cur, &scene.camera_poses[1]);
            if f.norm() < 1e-4 {
                small += 1;
            }
        }
        assert!(small as f64 > 0.98 * corrs.len() as f64, "{small}/{}", corrs.len());
    }

    proptest! {
        #[test]
        fn classification_ignores_order(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut flows: BTreeMap<u32, Vec<Vector3<f64>>> = BTreeMap::new();
            for l in 1..4 {
                flows.insert(l, (0..20).map(|_| Vector3::new(rng.gen_range(0.0..0.3), 0.0, 0.0)).collect());
            }
            let a = classify_objects(&flows, &settings());
            for v in flows.values_mut() {
                rand::seq::SliceRandom::shuffle(v.as_mut_slice(), &mut rng);
            }
            prop_assert_eq!(a, classify_objects(&flows, &settings()));
        }

        #[test]
        fn propagation_is_injective(votes in proptest::collection::vec((1u32..5, 1u32..6), 0..40)) {
            let ids: Vec<u32> = (1..6).collect();
            let (m, max) = propagate_labels(&votes, &ids, 4);
            let labels: BTreeSet<u32> = m.values().copied().collect();
            prop_assert_eq!(labels.len(), m.len());
            prop_assert!(m.values().all(|&l| l >= 1 && l <= max));
        }
    }
}
