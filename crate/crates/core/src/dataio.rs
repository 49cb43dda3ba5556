//! Input formats: settings, depth maps, instance masks, optical flow and
//! ground-truth pose files, plus the writers that produce them.
//!
//! Sequence directory layout:
//!
//! ```text
//! depth/000000.pgm | depth/000000.raw   16-bit PGM or raw float32
//! mask/000000.txt                       ASCII instance ids
//! flow/000001.flo                       Middlebury flow, frame i-1 -> i
//! pose_gt.txt                           optional camera poses
//! object_pose_gt.txt                    optional object poses
//! times.txt                             optional timestamps, one per frame
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, Pose};

/// Middlebury `.flo` tag, "PIEH" read as a little-endian float.
pub const FLO_TAG: f32 = 202021.25;
/// Flow components above this magnitude mark an unknown displacement.
pub const UNKNOWN_FLOW_THRESHOLD: f32 = 1e9;
/// Value written for unknown flow.
pub const UNKNOWN_FLOW: f32 = 1e10;
/// Largest rotation drift repaired by polar decomposition when reading poses.
pub const MAX_POSE_DRIFT: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("settings: missing key {0}")]
    MissingKey(String),
    #[error("settings: {key} must be positive, got {value}")]
    NonPositiveValue { key: String, value: f64 },
    #[error("settings: {key} = {value} is out of range")]
    OutOfRange { key: String, value: f64 },
    #[error("settings: distortion coefficient {0} must be zero (images are assumed rectified)")]
    NonzeroDistortion(String),
    #[error("{path}: cannot parse {what}")]
    Parse { path: PathBuf, what: String },
    #[error("{0}: bad magic")]
    BadMagic(PathBuf),
    #[error("{path}: size mismatch: {detail}")]
    SizeMismatch { path: PathBuf, detail: String },
    #[error("{path}: negative label {value}")]
    NegativeLabel { path: PathBuf, value: i64 },
    #[error("{path}:{line}: rotation is not rigid (drift {drift:e})")]
    NonRigidRotation {
        path: PathBuf,
        line: usize,
        drift: f64,
    },
    #[error("{path}:{line}: expected 13 or 14 fields, found {found}")]
    BadFieldCount {
        path: PathBuf,
        line: usize,
        found: usize,
    },
    #[error("{0}: sequence is empty")]
    EmptySequence(PathBuf),
    #[error("frame {frame}: {what} is {found:?}, expected {expected:?}")]
    InconsistentResolution {
        frame: usize,
        what: &'static str,
        found: (usize, usize),
        expected: (usize, usize),
    },
    #[error("frame {frame}: missing flow file {path}")]
    MissingFlow { frame: usize, path: PathBuf },
    #[error("frame {frame}: missing mask file {path}")]
    MissingMask { frame: usize, path: PathBuf },
    #[error("frame indices must be strictly increasing (frame {0})")]
    NonIncreasingIndex(usize),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(io_err(path))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
    }
    fs::write(path, bytes).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Settings

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectDecisionRule {
    /// Dynamic iff the fraction of points above the threshold exceeds the ratio.
    Fraction,
    /// Dynamic iff the mean scene-flow magnitude exceeds the threshold.
    MeanMagnitude,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacParams {
    pub iterations: usize,
    pub pixel_threshold: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmParams {
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Huber kernel on reprojection residuals; `None` gives plain least squares.
    pub huber_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriangulationGates {
    pub min_parallax_deg: f64,
    pub max_reprojection_px: f64,
    pub max_scale_ratio: f64,
}

impl Default for TriangulationGates {
    fn default() -> Self {
        Self {
            min_parallax_deg: 1.0,
            max_reprojection_px: 2.0,
            max_scale_ratio: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub intrinsics: CameraIntrinsics,
    /// Optional declared resolution (width, height).
    pub resolution: Option<(usize, usize)>,
    pub th_depth: f64,
    pub th_depth_obj: f64,
    pub depth_map_factor: f64,
    pub scene_flow_threshold: f64,
    pub dynamic_ratio: f64,
    pub object_rule: ObjectDecisionRule,
    pub grid_step: usize,
    /// Cap on static candidates detected per frame.
    pub max_static_points: usize,
    pub ransac: RansacParams,
    pub lm: LmParams,
    pub window_size: usize,
    pub keyframe_interval: usize,
    pub smoothness_weight: f64,
    /// Weight of the disparity part of stereo residuals in batch optimization.
    pub disparity_weight: f64,
    pub gates: TriangulationGates,
    /// Unknown keys seen while loading.
    pub warnings: Vec<String>,
}

impl Settings {
    /// Settings with the documented defaults for every optional key.
    pub fn with_defaults(
        intrinsics: CameraIntrinsics,
        th_depth: f64,
        th_depth_obj: f64,
        depth_map_factor: f64,
    ) -> Self {
        Self {
            intrinsics,
            resolution: None,
            th_depth,
            th_depth_obj,
            depth_map_factor,
            scene_flow_threshold: 0.12,
            dynamic_ratio: 0.3,
            object_rule: ObjectDecisionRule::Fraction,
            grid_step: 6,
            max_static_points: 1000,
            ransac: RansacParams {
                iterations: 200,
                pixel_threshold: 2.0,
                seed: 0,
            },
            lm: LmParams {
                max_iterations: 100,
                tolerance: 1e-8,
                huber_delta: Some(2.0),
            },
            window_size: 10,
            keyframe_interval: 1,
            smoothness_weight: 0.0,
            disparity_weight: 1.0,
            gates: TriangulationGates::default(),
            warnings: Vec::new(),
        }
    }

    /// Depth below which a point of the given label counts as close.
    pub fn close_depth_bound(&self, label: u32) -> f64 {
        let cap = if label == 0 {
            self.th_depth
        } else {
            self.th_depth_obj
        };
        (40.0 * self.intrinsics.baseline).min(cap)
    }

    pub fn to_text(&self) -> String {
        let k = &self.intrinsics;
        let mut s = String::new();
        let mut kv = |key: &str, value: String| {
            let _ = writeln!(s, "{key}: {value}");
        };
        kv("Camera.fx", fmt_f64(k.fx));
        kv("Camera.fy", fmt_f64(k.fy));
        kv("Camera.cx", fmt_f64(k.cx));
        kv("Camera.cy", fmt_f64(k.cy));
        kv("Camera.bf", fmt_f64(k.bf()));
        kv("Camera.fps", fmt_f64(k.fps));
        if let Some((w, h)) = self.resolution {
            kv("Camera.width", w.to_string());
            kv("Camera.height", h.to_string());
        }
        kv("DepthMapFactor", fmt_f64(self.depth_map_factor));
        kv("ThDepth", fmt_f64(self.th_depth));
        kv("ThDepthObj", fmt_f64(self.th_depth_obj));
        kv("SceneFlowThreshold", fmt_f64(self.scene_flow_threshold));
        kv("DynamicRatio", fmt_f64(self.dynamic_ratio));
        if self.object_rule == ObjectDecisionRule::MeanMagnitude {
            kv("SceneFlowRule", "mean".into());
        }
        kv("GridStep", self.grid_step.to_string());
        kv("Features.MaxStatic", self.max_static_points.to_string());
        kv("Ransac.Iterations", self.ransac.iterations.to_string());
        kv("Ransac.PixelThreshold", fmt_f64(self.ransac.pixel_threshold));
        kv("Ransac.Seed", self.ransac.seed.to_string());
        kv("LM.MaxIterations", self.lm.max_iterations.to_string());
        kv("LM.Tolerance", fmt_f64(self.lm.tolerance));
        match self.lm.huber_delta {
            Some(d) => kv("LM.HuberDelta", fmt_f64(d)),
            None => kv("LM.HuberDelta", "0".into()),
        }
        kv("Window.Size", self.window_size.to_string());
        kv("Keyframe.Interval", self.keyframe_interval.to_string());
        kv("Backend.SmoothnessWeight", fmt_f64(self.smoothness_weight));
        kv("Backend.DisparityWeight", fmt_f64(self.disparity_weight));
        kv("Map.MinParallaxDeg", fmt_f64(self.gates.min_parallax_deg));
        kv("Map.MaxReprojError", fmt_f64(self.gates.max_reprojection_px));
        kv("Map.MaxScaleRatio", fmt_f64(self.gates.max_scale_ratio));
        s
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        write_bytes(path, self.to_text().as_bytes())
    }
}

/// Shortest representation that parses back to the same value.
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

/// Reads a line-oriented `key: value` file. `#` starts a comment; lines
/// starting with `%` (YAML directives) and `---` are skipped.
pub fn parse_key_values(path: &Path, text: &str) -> Result<BTreeMap<String, String>, DataError> {
    let mut out = BTreeMap::new();
    for raw in text.lines() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() || line.starts_with('%') || line == "---" {
            continue;
        }
        let Some((key, value)) = line.split_once(':') else {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                what: format!("line {raw:?}"),
            });
        };
        let value = value.trim().trim_matches('"');
        out.insert(key.trim().to_string(), value.to_string());
    }
    Ok(out)
}

const SETTINGS_KEYS: &[&str] = &[
    "Camera.fx",
    "Camera.fy",
    "Camera.cx",
    "Camera.cy",
    "Camera.bf",
    "Camera.fps",
    "Camera.width",
    "Camera.height",
    "Camera.k1",
    "Camera.k2",
    "Camera.k3",
    "Camera.p1",
    "Camera.p2",
    "DepthMapFactor",
    "ThDepth",
    "ThDepthObj",
    "SceneFlowThreshold",
    "SceneFlowRule",
    "DynamicRatio",
    "GridStep",
    "Features.MaxStatic",
    "Ransac.Iterations",
    "Ransac.PixelThreshold",
    "Ransac.Seed",
    "LM.MaxIterations",
    "LM.Tolerance",
    "LM.HuberDelta",
    "Window.Size",
    "Keyframe.Interval",
    "Backend.SmoothnessWeight",
    "Backend.DisparityWeight",
    "Map.MinParallaxDeg",
    "Map.MaxReprojError",
    "Map.MaxScaleRatio",
];

struct KeyReader<'a> {
    path: &'a Path,
    map: &'a BTreeMap<String, String>,
}

impl KeyReader<'_> {
    fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    fn parse_f64(&self, key: &str, v: &str) -> Result<f64, DataError> {
        v.parse::<f64>().map_err(|_| DataError::Parse {
            path: self.path.to_path_buf(),
            what: format!("{key} = {v:?}"),
        })
    }

    fn required(&self, key: &str) -> Result<f64, DataError> {
        let v = self.raw(key).ok_or_else(|| DataError::MissingKey(key.into()))?;
        self.parse_f64(key, v)
    }

    fn positive(&self, key: &str) -> Result<f64, DataError> {
        let v = self.required(key)?;
        check_positive(key, v)
    }

    fn optional(&self, key: &str, default: f64) -> Result<f64, DataError> {
        match self.raw(key) {
            Some(v) => self.parse_f64(key, v),
            None => Ok(default),
        }
    }

    fn optional_positive(&self, key: &str, default: f64) -> Result<f64, DataError> {
        check_positive(key, self.optional(key, default)?)
    }

    fn optional_count(&self, key: &str, default: usize) -> Result<usize, DataError> {
        let v = self.optional_positive(key, default as f64)?;
        if v.fract() != 0.0 {
            return Err(DataError::OutOfRange {
                key: key.into(),
                value: v,
            });
        }
        Ok(v as usize)
    }
}

fn check_positive(key: &str, v: f64) -> Result<f64, DataError> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(DataError::NonPositiveValue {
            key: key.into(),
            value: v,
        });
    }
    Ok(v)
}

pub fn load_settings(path: &Path) -> Result<Settings, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    settings_from_text(path, &text)
}

pub fn settings_from_text(path: &Path, text: &str) -> Result<Settings, DataError> {
    let map = parse_key_values(path, text)?;
    let r = KeyReader { path, map: &map };

    let fx = r.positive("Camera.fx")?;
    let fy = r.positive("Camera.fy")?;
    let cx = r.required("Camera.cx")?;
    let cy = r.required("Camera.cy")?;
    let bf = r.positive("Camera.bf")?;
    let fps = r.positive("Camera.fps")?;
    for key in ["Camera.k1", "Camera.k2", "Camera.k3", "Camera.p1", "Camera.p2"] {
        if r.optional(key, 0.0)? != 0.0 {
            return Err(DataError::NonzeroDistortion(key.into()));
        }
    }
    let intrinsics = CameraIntrinsics {
        fx,
        fy,
        cx,
        cy,
        baseline: bf / fx,
        fps,
    };
    let mut s = Settings::with_defaults(
        intrinsics,
        r.positive("ThDepth")?,
        r.positive("ThDepthObj")?,
        r.positive("DepthMapFactor")?,
    );
    s.resolution = match (r.raw("Camera.width"), r.raw("Camera.height")) {
        (Some(_), Some(_)) => Some((
            r.optional_count("Camera.width", 1)?,
            r.optional_count("Camera.height", 1)?,
        )),
        _ => None,
    };
    s.scene_flow_threshold = r.optional_positive("SceneFlowThreshold", s.scene_flow_threshold)?;
    s.dynamic_ratio = r.optional_positive("DynamicRatio", s.dynamic_ratio)?;
    if s.dynamic_ratio >= 1.0 {
        return Err(DataError::OutOfRange {
            key: "DynamicRatio".into(),
            value: s.dynamic_ratio,
        });
    }
    s.object_rule = match r.raw("SceneFlowRule") {
        None | Some("fraction") => ObjectDecisionRule::Fraction,
        Some("mean") => ObjectDecisionRule::MeanMagnitude,
        Some(other) => {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                what: format!("SceneFlowRule = {other:?}"),
            })
        }
    };
    s.grid_step = r.optional_count("GridStep", s.grid_step)?;
    s.max_static_points = r.optional_count("Features.MaxStatic", s.max_static_points)?;
    s.ransac.iterations = r.optional_count("Ransac.Iterations", s.ransac.iterations)?;
    s.ransac.pixel_threshold = r.optional_positive("Ransac.PixelThreshold", s.ransac.pixel_threshold)?;
    s.ransac.seed = r.optional("Ransac.Seed", 0.0)? as u64;
    s.lm.max_iterations = r.optional_count("LM.MaxIterations", s.lm.max_iterations)?;
    s.lm.tolerance = r.optional_positive("LM.Tolerance", s.lm.tolerance)?;
    let huber = r.optional("LM.HuberDelta", s.ransac.pixel_threshold)?;
    s.lm.huber_delta = (huber > 0.0).then_some(huber);
    s.window_size = r.optional_count("Window.Size", s.window_size)?;
    s.keyframe_interval = r.optional_count("Keyframe.Interval", s.keyframe_interval)?;
    s.smoothness_weight = r.optional("Backend.SmoothnessWeight", 0.0)?;
    if s.smoothness_weight < 0.0 {
        return Err(DataError::OutOfRange {
            key: "Backend.SmoothnessWeight".into(),
            value: s.smoothness_weight,
        });
    }
    s.disparity_weight = r.optional_positive("Backend.DisparityWeight", s.disparity_weight)?;
    s.gates.min_parallax_deg = r.optional_positive("Map.MinParallaxDeg", s.gates.min_parallax_deg)?;
    s.gates.max_reprojection_px = r.optional_positive("Map.MaxReprojError", s.gates.max_reprojection_px)?;
    s.gates.max_scale_ratio = r.optional_positive("Map.MaxScaleRatio", s.gates.max_scale_ratio)?;

    for key in map.keys() {
        if !SETTINGS_KEYS.contains(&key.as_str()) {
            warn!("dataio: ignoring unknown key {key}");
            s.warnings.push(format!("unknown key {key}"));
        }
    }
    Ok(s)
}

// ---------------------------------------------------------------------------
// Depth

/// Per-pixel depth in meters; zero marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

/// Two neighbouring inverse depths further apart than this ratio are treated as
/// a discontinuity by [`DepthMap::sample`].
pub const DEPTH_CONTINUITY_RATIO: f64 = 1.1;

impl DepthMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn raw(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Valid depth at an integer pixel.
    pub fn at(&self, x: usize, y: usize) -> Option<f64> {
        if x >= self.width || y >= self.height {
            return None;
        }
        let d = self.raw(x, y);
        (d > 0.0 && d.is_finite()).then_some(d as f64)
    }

    /// Depth at a sub-pixel location, interpolating inverse depth bilinearly
    /// (exact on planar surfaces). Returns `None` when any of the four
    /// neighbours is invalid or they straddle a depth discontinuity.
    pub fn sample(&self, uv: &Vector2<f64>) -> Option<f64> {
        if !(uv.x >= 0.0 && uv.y >= 0.0) {
            return None;
        }
        let x0 = uv.x.floor() as usize;
        let y0 = uv.y.floor() as usize;
        let fx = uv.x - x0 as f64;
        let fy = uv.y - y0 as f64;
        if x0 >= self.width || y0 >= self.height {
            return None;
        }
        let x1 = if fx > 0.0 { x0 + 1 } else { x0 };
        let y1 = if fy > 0.0 { y0 + 1 } else { y0 };
        let corners = [
            self.at(x0, y0)?,
            self.at(x1, y0)?,
            self.at(x0, y1)?,
            self.at(x1, y1)?,
        ];
        let inv = corners.map(|d| 1.0 / d);
        let lo = inv.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = inv.iter().cloned().fold(0.0, f64::max);
        if hi > lo * DEPTH_CONTINUITY_RATIO {
            return None;
        }
        let top = inv[0] * (1.0 - fx) + inv[1] * fx;
        let bottom = inv[2] * (1.0 - fx) + inv[3] * fx;
        Some(1.0 / (top * (1.0 - fy) + bottom * fy))
    }
}

/// Storage format of a depth file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthFormat {
    /// 16-bit binary PGM holding `depth * factor`.
    Pgm16,
    /// Little-endian `u32 width, u32 height`, then float32 `depth * factor`.
    RawFloat,
}

impl DepthFormat {
    pub fn extension(self) -> &'static str {
        match self {
            DepthFormat::Pgm16 => "pgm",
            DepthFormat::RawFloat => "raw",
        }
    }
}

pub fn parse_depth(path: &Path, depth_map_factor: f64) -> Result<DepthMap, DataError> {
    let bytes = read_bytes(path)?;
    decode_depth(path, &bytes, depth_map_factor)
}

pub fn decode_depth(path: &Path, bytes: &[u8], factor: f64) -> Result<DepthMap, DataError> {
    if bytes.first() == Some(&b'P') {
        return decode_pgm(path, bytes, factor);
    }
    if bytes.len() < 8 {
        return Err(DataError::SizeMismatch {
            path: path.to_path_buf(),
            detail: format!("{} bytes is shorter than the raw header", bytes.len()),
        });
    }
    let width = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(8));
    if expected != Some(bytes.len()) {
        return Err(DataError::SizeMismatch {
            path: path.to_path_buf(),
            detail: format!("{width}x{height} raw depth needs {expected:?} bytes, found {}", bytes.len()),
        });
    }
    let factor = factor as f32;
    let values = bytes[8..]
        .chunks_exact(4)
        .map(|c| {
            let raw = f32::from_le_bytes(c.try_into().unwrap());
            if raw > 0.0 {
                raw / factor
            } else {
                0.0
            }
        })
        .collect();
    Ok(DepthMap {
        width,
        height,
        values,
    })
}

fn decode_pgm(path: &Path, bytes: &[u8], factor: f64) -> Result<DepthMap, DataError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(DataError::BadMagic(path.to_path_buf()));
    }
    // header: magic, width, height, maxval separated by whitespace / comments
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DataError::Parse {
                path: path.to_path_buf(),
                what: "PGM header".into(),
            })?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(DataError::BadMagic(path.to_path_buf()));
    }
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() != width * height * bytes_per {
        return Err(DataError::SizeMismatch {
            path: path.to_path_buf(),
            detail: format!(
                "{width}x{height} PGM needs {} payload bytes, found {}",
                width * height * bytes_per,
                payload.len()
            ),
        });
    }
    let values = payload
        .chunks_exact(bytes_per)
        .map(|c| {
            let raw = if bytes_per == 2 {
                u16::from_be_bytes([c[0], c[1]]) as f64
            } else {
                c[0] as f64
            };
            (raw / factor) as f32
        })
        .collect();
    Ok(DepthMap {
        width,
        height,
        values,
    })
}

pub fn encode_depth(depth: &DepthMap, format: DepthFormat, factor: f64) -> Vec<u8> {
    match format {
        DepthFormat::Pgm16 => {
            let mut out = format!("P5\n{} {}\n65535\n", depth.width, depth.height).into_bytes();
            for &d in &depth.values {
                let raw = (d as f64 * factor).round().clamp(0.0, 65535.0) as u16;
                out.extend_from_slice(&raw.to_be_bytes());
            }
            out
        }
        DepthFormat::RawFloat => {
            let mut out = Vec::with_capacity(8 + 4 * depth.values.len());
            out.extend_from_slice(&(depth.width as u32).to_le_bytes());
            out.extend_from_slice(&(depth.height as u32).to_le_bytes());
            let factor = factor as f32;
            for &d in &depth.values {
                out.extend_from_slice(&(d * factor).to_le_bytes());
            }
            out
        }
    }
}

pub fn write_depth(path: &Path, depth: &DepthMap, format: DepthFormat, factor: f64) -> Result<(), DataError> {
    write_bytes(path, &encode_depth(depth, format, factor))
}

// ---------------------------------------------------------------------------
// Masks

/// Per-pixel instance id, 0 for background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGrid {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
}

impl MaskGrid {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            labels: vec![0; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Label at the pixel containing `uv`, or `None` outside the image.
    pub fn at_subpixel(&self, uv: &Vector2<f64>) -> Option<u32> {
        let x = uv.x.round();
        let y = uv.y.round();
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        Some(self.at(x as usize, y as usize))
    }

    pub fn instance_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

pub fn parse_mask(path: &Path) -> Result<MaskGrid, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    decode_mask(path, &text)
}

pub fn decode_mask(path: &Path, text: &str) -> Result<MaskGrid, DataError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let parse_err = |what: String| DataError::Parse {
        path: path.to_path_buf(),
        what,
    };
    let header = lines.next().ok_or_else(|| parse_err("empty mask file".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse())
        .collect::<Result<_, _>>()
        .map_err(|_| parse_err(format!("header {header:?}")))?;
    let [width, height] = dims[..] else {
        return Err(parse_err(format!("header {header:?}")));
    };
    let mut labels = Vec::with_capacity(width * height);
    let mut rows = 0;
    for line in lines {
        rows += 1;
        let before = labels.len();
        for tok in line.split_whitespace() {
            let v: i64 = tok.parse().map_err(|_| parse_err(format!("label {tok:?}")))?;
            if v < 0 {
                return Err(DataError::NegativeLabel {
                    path: path.to_path_buf(),
                    value: v,
                });
            }
            let v = u32::try_from(v).map_err(|_| parse_err(format!("label {tok:?}")))?;
            labels.push(v);
        }
        if labels.len() - before != width {
            return Err(DataError::SizeMismatch {
                path: path.to_path_buf(),
                detail: format!("row {rows} has {} labels, expected {width}", labels.len() - before),
            });
        }
    }
    if rows != height {
        return Err(DataError::SizeMismatch {
            path: path.to_path_buf(),
            detail: format!("{rows} rows, expected {height}"),
        });
    }
    Ok(MaskGrid {
        width,
        height,
        labels,
    })
}

pub fn encode_mask(mask: &MaskGrid) -> String {
    let mut s = format!("{} {}\n", mask.width, mask.height);
    for row in mask.labels.chunks(mask.width.max(1)) {
        let mut first = true;
        for l in row {
            if !first {
                s.push(' ');
            }
            first = false;
            let _ = write!(s, "{l}");
        }
        s.push('\n');
    }
    s
}

pub fn write_mask(path: &Path, mask: &MaskGrid) -> Result<(), DataError> {
    write_bytes(path, encode_mask(mask).as_bytes())
}

// ---------------------------------------------------------------------------
// Flow

/// Forward displacement field in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f32; 2]>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![[0.0; 2]; width * height],
        }
    }

    #[inline]
    pub fn raw(&self, x: usize, y: usize) -> [f32; 2] {
        self.data[y * self.width + x]
    }

    /// Displacement at an integer pixel; `None` for unknown flow.
    pub fn at(&self, x: usize, y: usize) -> Option<Vector2<f64>> {
        let [du, dv] = self.raw(x, y);
        if !(du.abs() < UNKNOWN_FLOW_THRESHOLD && dv.abs() < UNKNOWN_FLOW_THRESHOLD) {
            return None;
        }
        Some(Vector2::new(du as f64, dv as f64))
    }

    /// Bilinear displacement at a sub-pixel location.
    pub fn sample(&self, uv: &Vector2<f64>) -> Option<Vector2<f64>> {
        if !(uv.x >= 0.0 && uv.y >= 0.0) {
            return None;
        }
        let x0 = uv.x.floor() as usize;
        let y0 = uv.y.floor() as usize;
        if x0 >= self.width || y0 >= self.height {
            return None;
        }
        let fx = uv.x - x0 as f64;
        let fy = uv.y - y0 as f64;
        let x1 = if fx > 0.0 { x0 + 1 } else { x0 };
        let y1 = if fy > 0.0 { y0 + 1 } else { y0 };
        if x1 >= self.width || y1 >= self.height {
            return None;
        }
        let a = self.at(x0, y0)?;
        let b = self.at(x1, y0)?;
        let c = self.at(x0, y1)?;
        let d = self.at(x1, y1)?;
        Some((a * (1.0 - fx) + b * fx) * (1.0 - fy) + (c * (1.0 - fx) + d * fx) * fy)
    }
}

pub fn parse_flow(path: &Path) -> Result<FlowField, DataError> {
    let bytes = read_bytes(path)?;
    decode_flow(path, &bytes)
}

pub fn decode_flow(path: &Path, bytes: &[u8]) -> Result<FlowField, DataError> {
    if bytes.len() < 4 {
        return Err(DataError::BadMagic(path.to_path_buf()));
    }
    if f32::from_le_bytes(bytes[0..4].try_into().unwrap()) != FLO_TAG {
        return Err(DataError::BadMagic(path.to_path_buf()));
    }
    if bytes.len() < 12 {
        return Err(DataError::SizeMismatch {
            path: path.to_path_buf(),
            detail: "truncated header".into(),
        });
    }
    let width = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let height = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if width < 0 || height < 0 {
        return Err(DataError::SizeMismatch {
            path: path.to_path_buf(),
            detail: format!("negative dimensions {width}x{height}"),
        });
    }
    let (width, height) = (width as usize, height as usize);
    let expected = 12 + width * height * 8;
    if bytes.len() != expected {
        return Err(DataError::SizeMismatch {
            path: path.to_path_buf(),
            detail: format!("{width}x{height} flow needs {expected} bytes, found {}", bytes.len()),
        });
    }
    let data = bytes[12..]
        .chunks_exact(8)
        .map(|c| {
            [
                f32::from_le_bytes(c[0..4].try_into().unwrap()),
                f32::from_le_bytes(c[4..8].try_into().unwrap()),
            ]
        })
        .collect();
    Ok(FlowField {
        width,
        height,
        data,
    })
}

pub fn encode_flow(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + flow.data.len() * 8);
    out.extend_from_slice(&FLO_TAG.to_le_bytes());
    out.extend_from_slice(&(flow.width as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for [du, dv] in &flow.data {
        out.extend_from_slice(&du.to_le_bytes());
        out.extend_from_slice(&dv.to_le_bytes());
    }
    out
}

pub fn write_flow(path: &Path, flow: &FlowField) -> Result<(), DataError> {
    write_bytes(path, &encode_flow(flow))
}

// ---------------------------------------------------------------------------
// Poses

/// One line of a pose file.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseRecord {
    pub frame: usize,
    pub object: Option<u32>,
    pub pose: Pose,
}

/// Reads camera (13 fields) or object (14 fields) pose files; 3x4 row-major.
pub fn parse_poses(path: &Path) -> Result<Vec<PoseRecord>, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    decode_poses(path, &text)
}

pub fn decode_poses(path: &Path, text: &str) -> Result<Vec<PoseRecord>, DataError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| DataError::Parse {
                path: path.to_path_buf(),
                what: format!("line {}", i + 1),
            })?;
        let (frame, object, m) = match fields.len() {
            13 => (fields[0], None, &fields[1..]),
            14 => (fields[0], Some(fields[1]), &fields[2..]),
            n => {
                return Err(DataError::BadFieldCount {
                    path: path.to_path_buf(),
                    line: i + 1,
                    found: n,
                })
            }
        };
        let index = |v: f64| -> Result<u64, DataError> {
            if v < 0.0 || v.fract() != 0.0 {
                return Err(DataError::Parse {
                    path: path.to_path_buf(),
                    what: format!("index {v} on line {}", i + 1),
                });
            }
            Ok(v as u64)
        };
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vector3::new(m[3], m[7], m[11]);
        let pose = Pose::from_approximate(rotation, translation, MAX_POSE_DRIFT).map_err(|_| {
            DataError::NonRigidRotation {
                path: path.to_path_buf(),
                line: i + 1,
                drift: crate::geometry::rotation_drift(&rotation),
            }
        })?;
        out.push(PoseRecord {
            frame: index(frame)? as usize,
            object: object.map(index).transpose()?.map(|o| o as u32),
            pose,
        });
    }
    Ok(out)
}

/// Appends the 12 numbers of a 3x4 row-major pose.
pub(crate) fn push_pose_fields(s: &mut String, pose: &Pose) {
    for r in 0..3 {
        for c in 0..3 {
            let _ = write!(s, " {}", fmt_f64(pose.rotation[(r, c)]));
        }
        let _ = write!(s, " {}", fmt_f64(pose.translation[r]));
    }
}

pub fn encode_poses(records: &[PoseRecord]) -> String {
    let mut s = String::new();
    for rec in records {
        let _ = write!(s, "{}", rec.frame);
        if let Some(o) = rec.object {
            let _ = write!(s, " {o}");
        }
        push_pose_fields(&mut s, &rec.pose);
        s.push('\n');
    }
    s
}

pub fn write_poses(path: &Path, records: &[PoseRecord]) -> Result<(), DataError> {
    write_bytes(path, encode_poses(records).as_bytes())
}

// ---------------------------------------------------------------------------
// Sequences

/// Inputs for one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBundle {
    pub index: usize,
    pub timestamp: f64,
    pub depth: DepthMap,
    pub mask: MaskGrid,
    /// Flow from the previous frame into this one; absent on the first frame.
    pub flow_from_prev: Option<FlowField>,
    pub gt_camera: Option<Pose>,
    pub gt_objects: BTreeMap<u32, Pose>,
}

impl FrameBundle {
    pub fn resolution(&self) -> (usize, usize) {
        (self.depth.width, self.depth.height)
    }
}

pub fn depth_path(dir: &Path, index: usize, format: DepthFormat) -> PathBuf {
    dir.join("depth").join(format!("{index:06}.{}", format.extension()))
}

pub fn mask_path(dir: &Path, index: usize) -> PathBuf {
    dir.join("mask").join(format!("{index:06}.txt"))
}

pub fn flow_path(dir: &Path, index: usize) -> PathBuf {
    dir.join("flow").join(format!("{index:06}.flo"))
}

pub const CAMERA_GT_FILE: &str = "pose_gt.txt";
pub const OBJECT_GT_FILE: &str = "object_pose_gt.txt";
pub const TIMES_FILE: &str = "times.txt";

fn depth_files(dir: &Path) -> Result<Vec<(usize, PathBuf)>, DataError> {
    let depth_dir = dir.join("depth");
    let entries = match fs::read_dir(&depth_dir) {
        Ok(e) => e,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(&depth_dir)(e)),
    };
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(io_err(&depth_dir))?;
        let path = entry.path();
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if let Ok(index) = stem.parse::<usize>() {
            out.push((index, path));
        }
    }
    out.sort();
    for pair in out.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(DataError::NonIncreasingIndex(pair[1].0));
        }
    }
    Ok(out)
}

/// Loads every frame of a sequence directory, sorted by index.
pub fn load_sequence(dir: &Path, settings: &Settings) -> Result<Vec<FrameBundle>, DataError> {
    let files = depth_files(dir)?;
    if files.is_empty() {
        return Err(DataError::EmptySequence(dir.to_path_buf()));
    }

    let gt_camera: BTreeMap<usize, Pose> = match optional_file(&dir.join(CAMERA_GT_FILE)) {
        Some(p) => parse_poses(&p)?.into_iter().map(|r| (r.frame, r.pose)).collect(),
        None => BTreeMap::new(),
    };
    let mut gt_objects: BTreeMap<usize, BTreeMap<u32, Pose>> = BTreeMap::new();
    if let Some(p) = optional_file(&dir.join(OBJECT_GT_FILE)) {
        for r in parse_poses(&p)? {
            gt_objects
                .entry(r.frame)
                .or_default()
                .insert(r.object.unwrap_or(0), r.pose);
        }
    }
    let times: Option<Vec<f64>> = match optional_file(&dir.join(TIMES_FILE)) {
        Some(p) => {
            let text = fs::read_to_string(&p).map_err(io_err(&p))?;
            Some(
                text.split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| DataError::Parse {
                        path: p.clone(),
                        what: "timestamps".into(),
                    })?,
            )
        }
        None => None,
    };

    let expected = settings.resolution;
    let mut bundles: Vec<FrameBundle> = Vec::with_capacity(files.len());
    for (pos, (index, path)) in files.iter().enumerate() {
        let index = *index;
        let depth = parse_depth(path, settings.depth_map_factor)?;
        let resolution = expected
            .or_else(|| bundles.first().map(|b| b.resolution()))
            .unwrap_or((depth.width, depth.height));
        let check = |what: &'static str, found: (usize, usize)| {
            if found != resolution {
                Err(DataError::InconsistentResolution {
                    frame: index,
                    what,
                    found,
                    expected: resolution,
                })
            } else {
                Ok(())
            }
        };
        check("depth", (depth.width, depth.height))?;
        let mpath = mask_path(dir, index);
        if !mpath.exists() {
            return Err(DataError::MissingMask {
                frame: index,
                path: mpath,
            });
        }
        let mask = parse_mask(&mpath)?;
        check("mask", (mask.width, mask.height))?;
        let flow_from_prev = if pos == 0 {
            None
        } else {
            let fpath = flow_path(dir, index);
            if !fpath.exists() {
                return Err(DataError::MissingFlow {
                    frame: index,
                    path: fpath,
                });
            }
            let flow = parse_flow(&fpath)?;
            check("flow", (flow.width, flow.height))?;
            Some(flow)
        };
        let timestamp = times
            .as_ref()
            .and_then(|t| t.get(pos).copied())
            .unwrap_or(index as f64 / settings.intrinsics.fps);
        bundles.push(FrameBundle {
            index,
            timestamp,
            depth,
            mask,
            flow_from_prev,
            gt_camera: gt_camera.get(&index).copied(),
            gt_objects: gt_objects.remove(&index).unwrap_or_default(),
        });
    }
    Ok(bundles)
}

fn optional_file(path: &Path) -> Option<PathBuf> {
    path.is_file().then(|| path.to_path_buf())
}

/// Writes a line-oriented text file, creating parent directories.
pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), DataError> {
    write_bytes(path, text.as_bytes())
}
