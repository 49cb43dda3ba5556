//! Sparse static map, camera and object trajectories, and their exports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix2, Vector2, Vector3};

use crate::dataio::{encode_poses, write_text, DataError, PoseRecord, TriangulationGates};
use crate::geometry::{backproject, project, CameraIntrinsics, Pose};

pub const SPARSE_MAP_FILE: &str = "sparse_map.txt";
pub const CAMERA_TRAJECTORY_FILE: &str = "camera_trajectory.txt";
pub const OBJECT_TRAJECTORY_FILE: &str = "object_trajectories.txt";
pub const OBJECT_MOTION_FILE: &str = "object_motions.txt";
/// Keyframes a point may stay single-observed before culling.
pub const CULL_GRACE: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct MapPoint {
    pub position: Vector3<f64>,
    /// Frame indices of the observing keyframes.
    pub observations: BTreeSet<usize>,
    /// Created from one back-projected close point.
    pub single_view: bool,
    /// Keyframe count when the point was created.
    pub created: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub frame: usize,
    pub pose: Pose,
    pub observed: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseMap {
    pub points: BTreeMap<u64, MapPoint>,
    pub keyframes: Vec<Keyframe>,
}

impl SparseMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Appends a keyframe; frames must increase.
    pub fn add_keyframe(&mut self, frame: usize, pose: Pose) -> bool {
        if self.keyframes.last().is_some_and(|k| k.frame >= frame) {
            return false;
        }
        self.keyframes.push(Keyframe {
            frame,
            pose,
            observed: Vec::new(),
        });
        true
    }

    /// Records that the newest keyframe sees point `id`.
    pub fn observe(&mut self, id: u64) -> bool {
        let Some(kf) = self.keyframes.last_mut() else { return false };
        match self.points.get_mut(&id) {
            Some(p) => {
                if p.observations.insert(kf.frame) {
                    kf.observed.push(id);
                }
                true
            }
            None => false,
        }
    }

    /// Inserts a back-projected close point seen by the newest keyframe.
    pub fn insert_close(&mut self, id: u64, position: Vector3<f64>) {
        let Some(kf) = self.keyframes.last_mut() else { return };
        if self.points.contains_key(&id) {
            return;
        }
        kf.observed.push(id);
        self.points.insert(
            id,
            MapPoint {
                position,
                observations: BTreeSet::from([kf.frame]),
                single_view: true,
                created: self.keyframes.len(),
            },
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoViewMatch {
    pub id: u64,
    pub uv_a: Vector2<f64>,
    pub uv_b: Vector2<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangulationReport {
    pub accepted: Vec<u64>,
    /// Ids failing each gate; one id can fail several.
    pub parallax: Vec<u64>,
    pub reprojection: Vec<u64>,
    pub scale: Vec<u64>,
}

impl TriangulationReport {
    pub fn rejected(&self) -> BTreeSet<u64> {
        self.parallax.iter().chain(&self.reprojection).chain(&self.scale).copied().collect()
    }
}

fn ray(uv: &Vector2<f64>, pose: &Pose, k: &CameraIntrinsics) -> Vector3<f64> {
    pose.rotation * backproject(uv, 1.0, k).expect("unit depth").normalize()
}

/// Midpoint of the closest points of the two viewing rays; `None` for
/// parallel rays.
pub fn triangulate_midpoint(
    uv_a: &Vector2<f64>,
    pose_a: &Pose,
    uv_b: &Vector2<f64>,
    pose_b: &Pose,
    k: &CameraIntrinsics,
) -> Option<Vector3<f64>> {
    let (da, db) = (ray(uv_a, pose_a, k), ray(uv_b, pose_b, k));
    let (ca, cb) = (pose_a.translation, pose_b.translation);
    let m = Matrix2::new(da.dot(&da), -da.dot(&db), da.dot(&db), -db.dot(&db));
    let r = Vector2::new(da.dot(&(cb - ca)), db.dot(&(cb - ca)));
    if m.determinant().abs() < 1e-12 {
        return None;
    }
    let s = m.try_inverse()? * r;
    Some(((ca + da * s.x) + (cb + db * s.y)) / 2.0)
}

fn reprojection_error(p: &Vector3<f64>, pose: &Pose, uv: &Vector2<f64>, k: &CameraIntrinsics) -> f64 {
    project(&pose.inverse().transform_point(p), k).map_or(f64::INFINITY, |q| (q - uv).norm())
}

/// Triangulates matches between keyframes `a` and `b` and inserts the ones
/// passing the parallax, reprojection and scale gates. Each gate is
/// evaluated on its own.
pub fn insert_triangulated(
    map: &mut SparseMap,
    matches: &[TwoViewMatch],
    (frame_a, pose_a): (usize, &Pose),
    (frame_b, pose_b): (usize, &Pose),
    k: &CameraIntrinsics,
    gates: &TriangulationGates,
) -> TriangulationReport {
    let mut report = TriangulationReport::default();
    let min_cos = gates.min_parallax_deg.to_radians().cos();
    for m in matches {
        let (da, db) = (ray(&m.uv_a, pose_a, k), ray(&m.uv_b, pose_b, k));
        let parallax_ok = da.dot(&db) < min_cos;
        let point = triangulate_midpoint(&m.uv_a, pose_a, &m.uv_b, pose_b, k);
        let (reproj_ok, scale_ok) = match point {
            Some(p) => {
                let ea = reprojection_error(&p, pose_a, &m.uv_a, k);
                let eb = reprojection_error(&p, pose_b, &m.uv_b, k);
                let ratio = (p - pose_a.translation).norm() / (p - pose_b.translation).norm();
                (
                    ea < gates.max_reprojection_px && eb < gates.max_reprojection_px,
                    ratio >= 1.0 / gates.max_scale_ratio && ratio <= gates.max_scale_ratio,
                )
            }
            None => (true, true),
        };
        if !parallax_ok {
            report.parallax.push(m.id);
        }
        if !reproj_ok {
            report.reprojection.push(m.id);
        }
        if !scale_ok {
            report.scale.push(m.id);
        }
        let (Some(p), true, true, true) = (point, parallax_ok, reproj_ok, scale_ok) else { continue };
        report.accepted.push(m.id);
        let created = map.keyframes.len();
        let entry = map.points.entry(m.id).or_insert(MapPoint {
            position: p,
            observations: BTreeSet::new(),
            single_view: false,
            created,
        });
        entry.observations.extend([frame_a, frame_b]);
        for kf in map.keyframes.iter_mut().filter(|kf| kf.frame == frame_a || kf.frame == frame_b) {
            if !kf.observed.contains(&m.id) {
                kf.observed.push(m.id);
            }
        }
    }
    report
}

/// Drops points seen by fewer than two keyframes once they are older than
/// the grace window.
pub fn cull_points(map: &mut SparseMap) {
    let now = map.keyframes.len();
    map.points.retain(|_, p| p.observations.len() >= 2 || now.saturating_sub(p.created) < CULL_GRACE);
}

/// Header line of the sparse map file.
pub const SPARSE_MAP_HEADER: &str = "x y z id nobs";

pub fn encode_sparse_map(map: &SparseMap) -> String {
    let mut s = String::from(SPARSE_MAP_HEADER);
    s.push('\n');
    for (id, p) in &map.points {
        let _ = writeln!(
            s,
            "{:.8e} {:.8e} {:.8e} {id} {}",
            p.position.x,
            p.position.y,
            p.position.z,
            p.observations.len()
        );
    }
    s
}

pub fn export_sparse_map(map: &SparseMap, path: &Path) -> Result<(), DataError> {
    write_text(path, &encode_sparse_map(map))
}

/// Reads a sparse map file back as `(id, position, nobs)` rows.
pub fn parse_sparse_map(path: &Path, text: &str) -> Result<Vec<(u64, Vector3<f64>, usize)>, DataError> {
    let bad = |line: usize| DataError::Parse {
        path: path.to_path_buf(),
        what: format!("line {line}"),
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(bad(i + 1));
        }
        let num = |t: &str| t.parse::<f64>().map_err(|_| bad(i + 1));
        out.push((
            f[3].parse().map_err(|_| bad(i + 1))?,
            Vector3::new(num(f[0])?, num(f[1])?, num(f[2])?),
            f[4].parse().map_err(|_| bad(i + 1))?,
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTrackEntry {
    pub centroid: Vector3<f64>,
    /// Motion from the previous frame.
    pub motion: Pose,
    pub speed: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryMap {
    pub camera: BTreeMap<usize, Pose>,
    pub objects: BTreeMap<u32, BTreeMap<usize, ObjectTrackEntry>>,
}

impl TrajectoryMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_camera(&mut self, frame: usize, pose: Pose) {
        self.camera.insert(frame, pose);
    }

    pub fn set_object(&mut self, label: u32, frame: usize, entry: ObjectTrackEntry) {
        self.objects.entry(label).or_default().insert(frame, entry);
    }
}

pub fn encode_object_trajectories(traj: &TrajectoryMap) -> String {
    let mut rows: Vec<(usize, u32, &ObjectTrackEntry)> = traj
        .objects
        .iter()
        .flat_map(|(&l, m)| m.iter().map(move |(&f, e)| (f, l, e)))
        .collect();
    rows.sort_by_key(|r| (r.0, r.1));
    let mut s = String::new();
    for (f, l, e) in rows {
        let _ = writeln!(s, "{f} {l} {} {} {} {}", e.centroid.x, e.centroid.y, e.centroid.z, e.speed);
    }
    s
}

fn motion_records(traj: &TrajectoryMap) -> Vec<PoseRecord> {
    let mut out: Vec<PoseRecord> = traj
        .objects
        .iter()
        .flat_map(|(&l, m)| {
            m.iter().map(move |(&frame, e)| PoseRecord {
                frame,
                object: Some(l),
                pose: e.motion,
            })
        })
        .collect();
    out.sort_by_key(|r| (r.frame, r.object));
    out
}

/// Writes the camera trajectory, object centroid/speed rows and object
/// motions into `dir`.
pub fn export_trajectories(traj: &TrajectoryMap, dir: &Path) -> Result<(), DataError> {
    let camera: Vec<PoseRecord> = traj
        .camera
        .iter()
        .map(|(&frame, &pose)| PoseRecord {
            frame,
            object: None,
            pose,
        })
        .collect();
    write_text(&dir.join(CAMERA_TRAJECTORY_FILE), &encode_poses(&camera))?;
    write_text(&dir.join(OBJECT_TRAJECTORY_FILE), &encode_object_trajectories(traj))?;
    write_text(&dir.join(OBJECT_MOTION_FILE), &encode_poses(&motion_records(traj)))
}
