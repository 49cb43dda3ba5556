//! Synthetic RGB-D sequences with exact ground truth.
//!
//! Scenes are built from planar primitives: an optional ground plane, static
//! rectangular patches ("landmarks") and box-shaped rigid objects. Every
//! pixel is ray cast against them, so depth is exact at pixel centres and
//! inverse depth is affine inside each surface. Forward flow is the exact
//! reprojection of each pixel's surface point after the frame's motion.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::dataio::{
    depth_path, flow_path, mask_path, parse_key_values, write_depth, write_flow, write_mask, write_poses,
    write_text, DataError, DepthFormat, DepthMap, FlowField, FrameBundle, MaskGrid, PoseRecord, Settings,
    CAMERA_GT_FILE, OBJECT_GT_FILE, TIMES_FILE, UNKNOWN_FLOW,
};
use crate::geometry::{project_unchecked, CameraIntrinsics, Pose};

/// File name of the settings written next to a generated sequence.
pub const SETTINGS_FILE: &str = "settings.txt";

const MIN_RAY_DEPTH: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("degenerate scene: {0}")]
    DegenerateSpec(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub fn rot_y(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

#[derive(Debug, Clone, PartialEq)]
pub enum CameraPath {
    /// Straight along +z, `step` meters per frame (0 keeps the camera still).
    Line { step: f64 },
    /// Arc of the given radius turning towards +x.
    Arc { radius: f64, step: f64 },
    /// Forward steps with random heading changes, kept within `|x| <= bound`.
    RandomWalk { step: f64, max_yaw_step: f64, bound: f64 },
}

impl CameraPath {
    fn poses(&self, count: usize, rng: &mut ChaCha8Rng) -> Vec<Pose> {
        match *self {
            CameraPath::Line { step } => (0..count)
                .map(|k| Pose::from_translation(Vector3::new(0.0, 0.0, k as f64 * step)))
                .collect(),
            CameraPath::Arc { radius, step } => (0..count)
                .map(|k| arc_pose(radius, 0.0, k as f64 * step / radius, 0.0))
                .collect(),
            CameraPath::RandomWalk {
                step,
                max_yaw_step,
                bound,
            } => {
                let mut out = Vec::with_capacity(count);
                let mut yaw: f64 = 0.0;
                let mut pos = Vector3::<f64>::zeros();
                for k in 0..count {
                    if k > 0 {
                        let mut d = rng.gen_range(-max_yaw_step..=max_yaw_step);
                        if pos.x.abs() > bound {
                            d = -pos.x.signum() * max_yaw_step;
                        }
                        yaw = (yaw + d).clamp(-1.0, 1.0);
                        pos += step * Vector3::new(yaw.sin(), 0.0, yaw.cos());
                    }
                    out.push(Pose {
                        rotation: rot_y(yaw),
                        translation: pos,
                    });
                }
                out
            }
        }
    }
}

/// Pose on the arc of radius `radius - offset` around `(radius, 0, 0)`.
fn arc_pose(radius: f64, offset: f64, theta: f64, y: f64) -> Pose {
    let r = radius - offset;
    Pose {
        rotation: rot_y(theta),
        translation: Vector3::new(radius - r * theta.cos(), y, r * theta.sin()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectPath {
    /// Drives along the camera path shifted sideways by `offset` (+x is
    /// right), starting `start` meters ahead, `speed` meters per frame.
    /// Only defined for line and arc camera paths.
    Lane { offset: f64, start: f64, speed: f64 },
    /// Constant world velocity and yaw rate.
    Linear {
        position: Vector3<f64>,
        velocity: Vector3<f64>,
        yaw: f64,
        yaw_rate: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    /// Mask instance id, also used as the ground-truth id.
    pub label: u32,
    pub path: ObjectPath,
    /// Box size (width x, height y, length z) in meters.
    pub size: Vector3<f64>,
    /// Height of the box centre; `None` rests it on the ground plane.
    pub center_y: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSpec {
    pub count: usize,
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
    /// Edge length range of the square patches.
    pub size: (f64, f64),
    /// Minimum horizontal distance from a patch centre to the camera corridor.
    pub clearance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseSpec {
    /// Flow noise, pixels.
    pub pixel_sigma: f64,
    /// Relative depth noise.
    pub depth_sigma: f64,
    /// Fraction of pixels whose flow points to a uniformly random pixel.
    pub outlier_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub frames: usize,
    pub intrinsics: CameraIntrinsics,
    pub width: usize,
    pub height: usize,
    pub camera_path: CameraPath,
    pub landmarks: LandmarkSpec,
    pub ground_height: Option<f64>,
    pub objects: Vec<ObjectSpec>,
    pub noise: NoiseSpec,
    pub seed: u64,
    pub depth_format: DepthFormat,
    pub depth_map_factor: f64,
}

impl SceneSpec {
    /// 50-frame arc drive with 300 landmarks, two moving cars and one parked car.
    pub fn standard() -> Self {
        let car = Vector3::new(1.8, 1.5, 4.0);
        Self {
            frames: 50,
            intrinsics: CameraIntrinsics {
                fx: 350.0,
                fy: 350.0,
                cx: 320.0,
                cy: 100.0,
                baseline: 0.5,
                fps: 10.0,
            },
            width: 640,
            height: 200,
            camera_path: CameraPath::Arc {
                radius: 100.0,
                step: 0.3,
            },
            landmarks: LandmarkSpec {
                count: 300,
                min: Vector3::new(-30.0, -4.0, -5.0),
                max: Vector3::new(30.0, 1.0, 60.0),
                size: (2.0, 4.0),
                clearance: 11.0,
            },
            ground_height: Some(1.6),
            objects: vec![
                ObjectSpec {
                    label: 1,
                    path: ObjectPath::Lane {
                        offset: -3.5,
                        start: 8.0,
                        speed: 0.4,
                    },
                    size: car,
                    center_y: None,
                },
                ObjectSpec {
                    label: 2,
                    path: ObjectPath::Lane {
                        offset: 7.5,
                        start: 15.0,
                        speed: 0.35,
                    },
                    size: car,
                    center_y: None,
                },
                ObjectSpec {
                    label: 3,
                    path: ObjectPath::Lane {
                        offset: 3.5,
                        start: 6.0,
                        speed: 0.0,
                    },
                    size: car,
                    center_y: None,
                },
            ],
            noise: NoiseSpec::default(),
            seed: 7,
            depth_format: DepthFormat::RawFloat,
            depth_map_factor: 256.0,
        }
    }

    /// Run settings matching the scene's camera.
    pub fn settings(&self) -> Settings {
        let b = self.intrinsics.baseline;
        let mut s = Settings::with_defaults(self.intrinsics, 40.0 * b, 40.0 * b, self.depth_map_factor);
        s.resolution = Some((self.width, self.height));
        s
    }

    fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::DegenerateSpec(m.to_string()));
        if self.frames == 0 {
            return bad("frame count must be positive");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive");
        }
        if !self.intrinsics.is_valid() {
            return bad("invalid intrinsics");
        }
        if self.landmarks.count == 0 && self.ground_height.is_none() {
            return bad("no static structure (zero landmarks and no ground)");
        }
        let n = &self.noise;
        if !(n.pixel_sigma >= 0.0 && n.depth_sigma >= 0.0) {
            return bad("noise sigmas must be non-negative");
        }
        if !(0.0..1.0).contains(&n.outlier_fraction) {
            return bad("outlier fraction must be in [0, 1)");
        }
        if !(self.depth_map_factor > 0.0) {
            return bad("depth map factor must be positive");
        }
        let l = &self.landmarks;
        if l.count > 0 && (l.size.0 <= 0.0 || l.size.1 < l.size.0 || (l.max - l.min).min() <= 0.0) {
            return bad("landmark box or size range is empty");
        }
        let mut labels: Vec<u32> = self.objects.iter().map(|o| o.label).collect();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() != self.objects.len() || labels.first() == Some(&0) {
            return bad("object labels must be unique and positive");
        }
        for o in &self.objects {
            if o.size.min() <= 0.0 {
                return bad("object size must be positive");
            }
            if matches!(o.path, ObjectPath::Lane { .. }) && matches!(self.camera_path, CameraPath::RandomWalk { .. }) {
                return bad("lane objects need a line or arc camera path");
            }
        }
        Ok(())
    }

    fn object_pose(&self, o: &ObjectSpec, k: usize) -> Pose {
        let y = o
            .center_y
            .unwrap_or_else(|| self.ground_height.map(|g| g - o.size.y / 2.0).unwrap_or(0.0));
        match o.path {
            ObjectPath::Lane { offset, start, speed } => match self.camera_path {
                CameraPath::Arc { radius, .. } => {
                    let theta = start / radius + k as f64 * speed / (radius - offset);
                    arc_pose(radius, offset, theta, y)
                }
                _ => Pose::from_translation(Vector3::new(offset, y, start + k as f64 * speed)),
            },
            ObjectPath::Linear {
                position,
                velocity,
                yaw,
                yaw_rate,
            } => Pose {
                rotation: rot_y(yaw + k as f64 * yaw_rate),
                translation: position + velocity * k as f64,
            },
        }
    }
}

/// Which surface a pixel sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owner {
    Background,
    Static,
    /// Index into `SceneSpec::objects`.
    Object(usize),
}

/// Noise-free f64 render of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactFrame {
    /// Depth per pixel (0 on background).
    pub depth: Vec<f64>,
    pub owner: Vec<Owner>,
    /// Flow from the previous frame, indexed by pixels of the previous frame;
    /// `None` where unknown.
    pub flow_from_prev: Option<Vec<Option<Vector2<f64>>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub settings: Settings,
    /// Frames exactly as they are written to disk.
    pub frames: Vec<FrameBundle>,
    pub exact: Vec<ExactFrame>,
    pub camera_poses: Vec<Pose>,
    /// Per frame, label -> object pose (object to world).
    pub object_poses: Vec<BTreeMap<u32, Pose>>,
}

impl SyntheticScene {
    /// Ground-truth world motion of an object from frame `k-1` to `k`.
    pub fn object_motion(&self, label: u32, k: usize) -> Option<Pose> {
        let a = self.object_poses.get(k.checked_sub(1)?)?.get(&label)?;
        let b = self.object_poses.get(k)?.get(&label)?;
        Some(b.compose(&a.inverse()))
    }
}

struct Quad {
    center: Vector3<f64>,
    /// Half-edge vectors.
    a: Vector3<f64>,
    b: Vector3<f64>,
    normal: Vector3<f64>,
}

impl Quad {
    fn corners(&self) -> [Vector3<f64>; 4] {
        let (c, a, b) = (self.center, self.a, self.b);
        [c + a + b, c + a - b, c - a + b, c - a - b]
    }

    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let denom = self.normal.dot(d);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = self.normal.dot(&(self.center - o)) / denom;
        let rel = o + d * t - self.center;
        let inside = rel.dot(&self.a).abs() <= self.a.norm_squared() && rel.dot(&self.b).abs() <= self.b.norm_squared();
        inside.then_some(t)
    }
}

fn place_landmarks(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Quad> {
    let l = &spec.landmarks;
    if l.count == 0 {
        return Vec::new();
    }
    // the corridor extends past the last frame so objects ahead stay clear
    let extra = match spec.camera_path {
        CameraPath::Line { step } | CameraPath::Arc { step, .. } | CameraPath::RandomWalk { step, .. } => {
            if step > 0.0 {
                (40.0 / step).ceil() as usize
            } else {
                0
            }
        }
    };
    let mut path_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let corridor: Vec<Vector3<f64>> = spec
        .camera_path
        .poses(spec.frames + extra, &mut path_rng)
        .iter()
        .map(|p| p.translation)
        .collect();
    let nearest = |c: &Vector3<f64>| -> (f64, Vector3<f64>) {
        corridor
            .iter()
            .map(|p| {
                let d = Vector3::new(p.x - c.x, 0.0, p.z - c.z);
                (d.norm(), d)
            })
            .fold((f64::INFINITY, Vector3::z()), |a, b| if b.0 < a.0 { b } else { a })
    };
    let mut quads = Vec::with_capacity(l.count);
    let mut attempts = 0;
    while quads.len() < l.count && attempts < 1000 * l.count {
        attempts += 1;
        let c = Vector3::new(
            rng.gen_range(l.min.x..l.max.x),
            rng.gen_range(l.min.y..l.max.y),
            rng.gen_range(l.min.z..l.max.z),
        );
        let (dist, towards) = nearest(&c);
        if dist < l.clearance {
            continue;
        }
        let yaw = rng.gen_range(-0.5..0.5);
        let pitch: f64 = rng.gen_range(-0.3..0.3);
        let horizontal = rot_y(yaw) * towards.normalize();
        let normal = (horizontal * pitch.cos() + Vector3::new(0.0, -pitch.sin(), 0.0)).normalize();
        let half = rng.gen_range(l.size.0..=l.size.1) / 2.0;
        let a = normal.cross(&Vector3::y()).normalize() * half;
        let b = normal.cross(&a).normalize() * half;
        quads.push(Quad { center: c, a, b, normal });
    }
    quads
}

fn box_corners(pose: &Pose, half: &Vector3<f64>) -> [Vector3<f64>; 8] {
    let mut out = [Vector3::zeros(); 8];
    for (i, c) in out.iter_mut().enumerate() {
        let s = Vector3::new(
            if i & 1 == 0 { -1.0 } else { 1.0 },
            if i & 2 == 0 { -1.0 } else { 1.0 },
            if i & 4 == 0 { -1.0 } else { 1.0 },
        );
        *c = pose.transform_point(&half.component_mul(&s));
    }
    out
}

/// Entry distance of a ray into an axis-aligned box centred at the origin.
fn slab(o: &Vector3<f64>, d: &Vector3<f64>, half: &Vector3<f64>) -> Option<f64> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for i in 0..3 {
        if d[i].abs() < 1e-15 {
            if o[i].abs() > half[i] {
                return None;
            }
            continue;
        }
        let a = (-half[i] - o[i]) / d[i];
        let b = (half[i] - o[i]) / d[i];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t0 <= t1).then_some(t0)
}

struct Raster<'a> {
    width: usize,
    height: usize,
    k: &'a CameraIntrinsics,
    camera: &'a Pose,
    depth: Vec<f64>,
    owner: Vec<Owner>,
}

impl Raster<'_> {
    /// Pixel bounds covering the given world points, or `None` if all are behind.
    fn bounds(&self, pts: &[Vector3<f64>]) -> Option<(usize, usize, usize, usize)> {
        let inv = self.camera.inverse();
        let cam: Vec<Vector3<f64>> = pts.iter().map(|p| inv.transform_point(p)).collect();
        if cam.iter().all(|p| p.z < MIN_RAY_DEPTH) {
            return None;
        }
        if cam.iter().any(|p| p.z < MIN_RAY_DEPTH) {
            return Some((0, 0, self.width - 1, self.height - 1));
        }
        let uv: Vec<Vector2<f64>> = cam.iter().map(|p| project_unchecked(p, self.k)).collect();
        let x0 = uv.iter().map(|p| p.x).fold(f64::INFINITY, f64::min).floor().max(0.0);
        let y0 = uv.iter().map(|p| p.y).fold(f64::INFINITY, f64::min).floor().max(0.0);
        let x1 = uv.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max).ceil();
        let y1 = uv.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max).ceil();
        if x1 < 0.0 || y1 < 0.0 || x0 >= self.width as f64 || y0 >= self.height as f64 {
            return None;
        }
        Some((
            x0 as usize,
            y0 as usize,
            (x1 as usize).min(self.width - 1),
            (y1 as usize).min(self.height - 1),
        ))
    }

    fn ray(&self, x: usize, y: usize) -> Vector3<f64> {
        let k = self.k;
        self.camera.rotation * Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0)
    }

    fn splat(&mut self, x: usize, y: usize, t: f64, who: Owner) {
        let i = y * self.width + x;
        if t >= MIN_RAY_DEPTH && (self.depth[i] == 0.0 || t < self.depth[i]) {
            self.depth[i] = t;
            self.owner[i] = who;
        }
    }
}

fn render(
    spec: &SceneSpec,
    camera: &Pose,
    quads: &[Quad],
    objects: &[(Pose, Vector3<f64>)],
) -> (Vec<f64>, Vec<Owner>) {
    let (w, h) = (spec.width, spec.height);
    let mut r = Raster {
        width: w,
        height: h,
        k: &spec.intrinsics,
        camera,
        depth: vec![0.0; w * h],
        owner: vec![Owner::Background; w * h],
    };
    let o = camera.translation;
    if let Some(g) = spec.ground_height {
        for y in 0..h {
            for x in 0..w {
                let d = r.ray(x, y);
                if d.y > 1e-12 {
                    r.splat(x, y, (g - o.y) / d.y, Owner::Static);
                }
            }
        }
    }
    for q in quads {
        let Some((x0, y0, x1, y1)) = r.bounds(&q.corners()) else {
            continue;
        };
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = r.ray(x, y);
                if let Some(t) = q.intersect(&o, &d) {
                    r.splat(x, y, t, Owner::Static);
                }
            }
        }
    }
    for (j, (pose, half)) in objects.iter().enumerate() {
        let Some((x0, y0, x1, y1)) = r.bounds(&box_corners(pose, half)) else {
            continue;
        };
        let inv = pose.inverse();
        let oo = inv.transform_point(&o);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = inv.rotation * r.ray(x, y);
                if let Some(t) = slab(&oo, &d, half) {
                    r.splat(x, y, t, Owner::Object(j));
                }
            }
        }
    }
    (r.depth, r.owner)
}

/// Renders every frame, then applies noise and quantization.
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cameras = spec.camera_path.poses(spec.frames, &mut rng.clone());
    let quads = place_landmarks(spec, &mut rng);
    let (w, h) = (spec.width, spec.height);
    let k = spec.intrinsics;

    let object_poses: Vec<Vec<(Pose, Vector3<f64>)>> = (0..spec.frames)
        .map(|f| {
            spec.objects
                .iter()
                .map(|o| (spec.object_pose(o, f), o.size / 2.0))
                .collect()
        })
        .collect();
    for (f, cam) in cameras.iter().enumerate() {
        for (j, (pose, half)) in object_poses[f].iter().enumerate() {
            let p = pose.inverse().transform_point(&cam.translation);
            if (0..3).all(|i| p[i].abs() <= half[i] + MIN_RAY_DEPTH) {
                return Err(SynthError::DegenerateSpec(format!(
                    "camera inside object {} at frame {f}",
                    spec.objects[j].label
                )));
            }
        }
    }

    let mut exact: Vec<ExactFrame> = Vec::with_capacity(spec.frames);
    for (f, cam) in cameras.iter().enumerate() {
        let (depth, owner) = render(spec, cam, &quads, &object_poses[f]);
        let flow_from_prev = (f > 0).then(|| {
            let prev: &ExactFrame = &exact[f - 1];
            let prev_cam = &cameras[f - 1];
            let inv = cam.inverse();
            let motions: Vec<Pose> = (0..spec.objects.len())
                .map(|j| object_poses[f][j].0.compose(&object_poses[f - 1][j].0.inverse()))
                .collect();
            (0..w * h)
                .map(|i| {
                    let (x, y) = (i % w, i / w);
                    let p = prev_cam.transform_point(&Vector3::new(
                        (x as f64 - k.cx) / k.fx * prev.depth[i],
                        (y as f64 - k.cy) / k.fy * prev.depth[i],
                        prev.depth[i],
                    ));
                    let moved = match prev.owner[i] {
                        Owner::Background => return None,
                        Owner::Static if prev_cam == cam => return Some(Vector2::zeros()),
                        Owner::Static => p,
                        Owner::Object(j) => motions[j].transform_point(&p),
                    };
                    let c = inv.transform_point(&moved);
                    (c.z > 1e-3).then(|| project_unchecked(&c, &k) - Vector2::new(x as f64, y as f64))
                })
                .collect()
        });
        exact.push(ExactFrame {
            depth,
            owner,
            flow_from_prev,
        });
    }

    let depth_noise = Normal::new(0.0, spec.noise.depth_sigma.max(0.0)).unwrap();
    let pixel_noise = Normal::new(0.0, spec.noise.pixel_sigma.max(0.0)).unwrap();
    let mut frames = Vec::with_capacity(spec.frames);
    let mut gt_objects = Vec::with_capacity(spec.frames);
    for (f, e) in exact.iter().enumerate() {
        let mut noise = ChaCha8Rng::seed_from_u64(spec.seed);
        noise.set_stream(f as u64 + 1);
        let mut depth = DepthMap::new(w, h);
        let mut mask = MaskGrid::new(w, h);
        for i in 0..w * h {
            if e.depth[i] > 0.0 {
                let mut d = e.depth[i];
                if spec.noise.depth_sigma > 0.0 {
                    d *= 1.0 + depth_noise.sample(&mut noise);
                }
                depth.values[i] = d.max(MIN_RAY_DEPTH) as f32;
            }
            if let Owner::Object(j) = e.owner[i] {
                mask.labels[i] = spec.objects[j].label;
            }
        }
        if spec.depth_format == DepthFormat::Pgm16 {
            let factor = spec.depth_map_factor;
            for v in &mut depth.values {
                *v = ((*v as f64 * factor).round().clamp(0.0, 65535.0) / factor) as f32;
            }
        }
        let flow_from_prev = e.flow_from_prev.as_ref().map(|exact_flow| {
            let mut flow = FlowField::zeros(w, h);
            for (i, fl) in exact_flow.iter().enumerate() {
                let value = match fl {
                    None => [UNKNOWN_FLOW, UNKNOWN_FLOW],
                    Some(v) => {
                        let mut v = *v;
                        if spec.noise.outlier_fraction > 0.0 && noise.gen_bool(spec.noise.outlier_fraction) {
                            let (x, y) = ((i % w) as f64, (i / w) as f64);
                            v = Vector2::new(noise.gen_range(0.0..w as f64) - x, noise.gen_range(0.0..h as f64) - y);
                        } else if spec.noise.pixel_sigma > 0.0 {
                            v += Vector2::new(pixel_noise.sample(&mut noise), pixel_noise.sample(&mut noise));
                        }
                        [v.x as f32, v.y as f32]
                    }
                };
                flow.data[i] = value;
            }
            flow
        });
        let objects: BTreeMap<u32, Pose> = spec
            .objects
            .iter()
            .zip(&object_poses[f])
            .map(|(o, (p, _))| (o.label, *p))
            .collect();
        frames.push(FrameBundle {
            index: f,
            timestamp: f as f64 / k.fps,
            depth,
            mask,
            flow_from_prev,
            gt_camera: Some(cameras[f]),
            gt_objects: objects.clone(),
        });
        gt_objects.push(objects);
    }

    Ok(SyntheticScene {
        spec: spec.clone(),
        settings: spec.settings(),
        frames,
        exact,
        camera_poses: cameras,
        object_poses: gt_objects,
    })
}

/// Writes a scene in the sequence directory layout, plus `settings.txt`.
pub fn write_sequence(scene: &SyntheticScene, dir: &Path) -> Result<(), SynthError> {
    let factor = scene.spec.depth_map_factor;
    let mut cams = Vec::new();
    let mut objs = Vec::new();
    let mut times = String::new();
    for b in &scene.frames {
        write_depth(&depth_path(dir, b.index, scene.spec.depth_format), &b.depth, scene.spec.depth_format, factor)?;
        write_mask(&mask_path(dir, b.index), &b.mask)?;
        if let Some(flow) = &b.flow_from_prev {
            write_flow(&flow_path(dir, b.index), flow)?;
        }
        if let Some(p) = b.gt_camera {
            cams.push(PoseRecord {
                frame: b.index,
                object: None,
                pose: p,
            });
        }
        for (&label, p) in &b.gt_objects {
            objs.push(PoseRecord {
                frame: b.index,
                object: Some(label),
                pose: *p,
            });
        }
        times.push_str(&format!("{}\n", b.timestamp));
    }
    write_poses(&dir.join(CAMERA_GT_FILE), &cams)?;
    write_poses(&dir.join(OBJECT_GT_FILE), &objs)?;
    write_text(&dir.join(TIMES_FILE), &times)?;
    scene.settings.write(&dir.join(SETTINGS_FILE))?;
    Ok(())
}

fn spec_err(path: &Path, what: String) -> SynthError {
    SynthError::Data(DataError::Parse {
        path: path.to_path_buf(),
        what,
    })
}

fn numbers(path: &Path, key: &str, v: &str, n: usize) -> Result<Vec<f64>, SynthError> {
    let out: Vec<f64> = v
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|_| spec_err(path, format!("{key} = {v:?}")))?;
    if out.len() != n {
        return Err(spec_err(path, format!("{key} needs {n} numbers, got {v:?}")));
    }
    Ok(out)
}

/// Parses a scene description. Keys left out fall back to
/// [`SceneSpec::standard`]; listing any `Object.N.*` key replaces the
/// standard objects.
///
/// ```text
/// Frames: 50
/// Seed: 7
/// Trajectory: arc            # line | arc | random-walk
/// Trajectory.Step: 0.3
/// Trajectory.Radius: 100
/// Landmarks.Count: 300
/// Ground.Height: 1.6         # or "none"
/// Object.1.Lane: 3 8 0.4     # offset start speed
/// Object.2.Linear: -4 0.85 12 0 0 0.3   # position, velocity per frame
/// Object.2.Size: 1.8 1.5 4
/// Noise.Pixel: 0.5
/// Depth.Format: raw          # raw | pgm
/// ```
pub fn parse_scene_spec(path: &Path, text: &str) -> Result<SceneSpec, SynthError> {
    let map = parse_key_values(path, text)?;
    let mut spec = SceneSpec::standard();
    let num = |key: &str| -> Result<Option<f64>, SynthError> {
        map.get(key)
            .map(|v| v.parse::<f64>().map_err(|_| spec_err(path, format!("{key} = {v:?}"))))
            .transpose()
    };
    let count = |key: &str| -> Result<Option<usize>, SynthError> {
        match num(key)? {
            Some(v) if v < 0.0 || v.fract() != 0.0 => Err(spec_err(path, format!("{key} must be a count"))),
            Some(v) => Ok(Some(v as usize)),
            None => Ok(None),
        }
    };

    if let Some(v) = count("Frames")? {
        spec.frames = v;
    }
    if let Some(v) = count("Seed")? {
        spec.seed = v as u64;
    }
    let k = &mut spec.intrinsics;
    for (key, field) in [
        ("Camera.fx", &mut k.fx),
        ("Camera.fy", &mut k.fy),
        ("Camera.cx", &mut k.cx),
        ("Camera.cy", &mut k.cy),
        ("Camera.baseline", &mut k.baseline),
        ("Camera.fps", &mut k.fps),
    ] {
        if let Some(v) = num(key)? {
            *field = v;
        }
    }
    if let Some(v) = count("Camera.width")? {
        spec.width = v;
    }
    if let Some(v) = count("Camera.height")? {
        spec.height = v;
    }

    let step = num("Trajectory.Step")?.unwrap_or(0.3);
    spec.camera_path = match map.get("Trajectory").map(String::as_str) {
        None | Some("arc") => CameraPath::Arc {
            radius: num("Trajectory.Radius")?.unwrap_or(100.0),
            step,
        },
        Some("line") => CameraPath::Line { step },
        Some("random-walk") => CameraPath::RandomWalk {
            step,
            max_yaw_step: num("Trajectory.YawStep")?.unwrap_or(0.02),
            bound: num("Trajectory.Bound")?.unwrap_or(5.0),
        },
        Some(other) => return Err(spec_err(path, format!("Trajectory = {other:?}"))),
    };

    if let Some(v) = count("Landmarks.Count")? {
        spec.landmarks.count = v;
    }
    if let Some(v) = map.get("Landmarks.Min") {
        spec.landmarks.min = Vector3::from_column_slice(&numbers(path, "Landmarks.Min", v, 3)?);
    }
    if let Some(v) = map.get("Landmarks.Max") {
        spec.landmarks.max = Vector3::from_column_slice(&numbers(path, "Landmarks.Max", v, 3)?);
    }
    if let Some(v) = map.get("Landmarks.Size") {
        let s = numbers(path, "Landmarks.Size", v, 2)?;
        spec.landmarks.size = (s[0], s[1]);
    }
    if let Some(v) = num("Landmarks.Clearance")? {
        spec.landmarks.clearance = v;
    }
    match map.get("Ground.Height").map(String::as_str) {
        None => {}
        Some("none") => spec.ground_height = None,
        Some(_) => spec.ground_height = num("Ground.Height")?,
    }

    let mut objects: BTreeMap<u32, ObjectSpec> = BTreeMap::new();
    for (key, value) in &map {
        let Some(rest) = key.strip_prefix("Object.") else {
            continue;
        };
        let (label, field) = rest
            .split_once('.')
            .ok_or_else(|| spec_err(path, format!("bad key {key}")))?;
        let label: u32 = label.parse().map_err(|_| spec_err(path, format!("bad object label in {key}")))?;
        let o = objects.entry(label).or_insert_with(|| ObjectSpec {
            label,
            path: ObjectPath::Lane {
                offset: 0.0,
                start: 10.0,
                speed: 0.0,
            },
            size: Vector3::new(1.8, 1.5, 4.0),
            center_y: None,
        });
        match field {
            "Lane" => {
                let v = numbers(path, key, value, 3)?;
                o.path = ObjectPath::Lane {
                    offset: v[0],
                    start: v[1],
                    speed: v[2],
                };
            }
            "Linear" => {
                let v = numbers(path, key, value, 6)?;
                let yaw_rate = match &o.path {
                    ObjectPath::Linear { yaw_rate, .. } => *yaw_rate,
                    _ => 0.0,
                };
                o.path = ObjectPath::Linear {
                    position: Vector3::new(v[0], v[1], v[2]),
                    velocity: Vector3::new(v[3], v[4], v[5]),
                    yaw: 0.0,
                    yaw_rate,
                };
                o.center_y = Some(v[1]);
            }
            "YawRate" => {
                let rate = numbers(path, key, value, 1)?[0];
                if let ObjectPath::Linear { yaw_rate, .. } = &mut o.path {
                    *yaw_rate = rate;
                } else {
                    return Err(spec_err(path, format!("{key} needs a Linear object listed first")));
                }
            }
            "Size" => o.size = Vector3::from_column_slice(&numbers(path, key, value, 3)?),
            _ => return Err(spec_err(path, format!("unknown object key {key}"))),
        }
    }
    if !objects.is_empty() || map.get("Objects").map(String::as_str) == Some("none") {
        spec.objects = objects.into_values().collect();
    }

    if let Some(v) = num("Noise.Pixel")? {
        spec.noise.pixel_sigma = v;
    }
    if let Some(v) = num("Noise.Depth")? {
        spec.noise.depth_sigma = v;
    }
    if let Some(v) = num("Noise.Outliers")? {
        spec.noise.outlier_fraction = v;
    }
    spec.depth_format = match map.get("Depth.Format").map(String::as_str) {
        None | Some("raw") => DepthFormat::RawFloat,
        Some("pgm") => DepthFormat::Pgm16,
        Some(other) => return Err(spec_err(path, format!("Depth.Format = {other:?}"))),
    };
    if let Some(v) = num("DepthMapFactor")? {
        spec.depth_map_factor = v;
    }
    Ok(spec)
}

pub fn load_scene_spec(path: &Path) -> Result<SceneSpec, SynthError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_scene_spec(path, &text)
}
