//! Pose and speed error metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::dataio::{write_text, DataError};
use crate::geometry::Pose;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty input")]
    EmptyInput,
    #[error("alignment needs at least 3 non-collinear positions")]
    DegenerateAlignment,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoseError {
    /// Meters.
    pub translational: f64,
    /// Radians, in [0, pi].
    pub rotational: f64,
}

/// Error of `est` against `gt` via `P = est^-1 gt`.
pub fn pose_error(est: &Pose, gt: &Pose) -> PoseError {
    let p = est.inverse().compose(gt);
    let c = ((p.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    PoseError {
        translational: p.translation.norm(),
        rotational: c.acos(),
    }
}

pub fn rmse(values: &[f64]) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok((values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt())
}

/// Mean per-point displacement of a one-frame world motion, times fps (m/s).
pub fn object_speed(motion: &Pose, points_prev: &[Vector3<f64>], fps: f64) -> Result<f64, MetricsError> {
    if points_prev.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let sum: f64 = points_prev
        .iter()
        .map(|m| (motion.rotation * m + motion.translation - m).norm())
        .sum();
    Ok(sum / points_prev.len() as f64 * fps)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedError {
    /// `|v_est| - |v_gt|`, the reported value.
    pub est_minus_gt: f64,
    /// `v_gt - v_est`.
    pub gt_minus_est: f64,
}

pub fn speed_error(v_est: f64, v_gt: f64) -> SpeedError {
    SpeedError {
        est_minus_gt: v_est.abs() - v_gt.abs(),
        gt_minus_est: v_gt - v_est,
    }
}

/// Rigid transform `T` minimising `sum |T a_i - b_i|^2` (Umeyama without scale).
pub fn align_positions(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<Pose, MetricsError> {
    if a.len() != b.len() || a.len() < 3 {
        return Err(MetricsError::DegenerateAlignment);
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<Vector3<f64>>() / n;
    let mb = b.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (x, y) in a.iter().zip(b) {
        cov += (y - mb) * (x - ma).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let sv = svd.singular_values;
    if sv[1] < 1e-12 * sv[0].max(1e-300) {
        return Err(MetricsError::DegenerateAlignment);
    }
    let mut s = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    Ok(Pose {
        rotation: r,
        translation: mb - r * ma,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedRecord {
    pub frame: usize,
    pub label: u32,
    pub v_est: f64,
    pub v_gt: f64,
    pub error: SpeedError,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub camera: BTreeMap<usize, PoseError>,
    pub objects: BTreeMap<(usize, u32), PoseError>,
    pub speeds: Vec<SpeedRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RmsePair {
    pub translational: f64,
    pub rotational: f64,
}

fn rmse_of<'a>(errors: impl Iterator<Item = &'a PoseError> + Clone) -> Option<RmsePair> {
    let t: Vec<f64> = errors.clone().map(|e| e.translational).collect();
    let r: Vec<f64> = errors.map(|e| e.rotational).collect();
    Some(RmsePair {
        translational: rmse(&t).ok()?,
        rotational: rmse(&r).ok()?,
    })
}

impl MetricsReport {
    pub fn camera_rmse(&self) -> Option<RmsePair> {
        rmse_of(self.camera.values())
    }

    pub fn object_rmse(&self) -> Option<RmsePair> {
        rmse_of(self.objects.values())
    }

    /// Mean of the reported (`|v_est| - |v_gt|`) speed errors.
    pub fn mean_speed_error(&self) -> Option<f64> {
        if self.speeds.is_empty() {
            return None;
        }
        Some(self.speeds.iter().map(|s| s.error.est_minus_gt).sum::<f64>() / self.speeds.len() as f64)
    }

    pub fn mean_abs_speed_error(&self) -> Option<f64> {
        if self.speeds.is_empty() {
            return None;
        }
        Some(self.speeds.iter().map(|s| s.error.est_minus_gt.abs()).sum::<f64>() / self.speeds.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,frame,label,trans_err_m,rot_err_rad,v_est_mps,v_gt_mps,v_est_kmh,speed_err,speed_err_gt_minus_est\n");
        for (f, e) in &self.camera {
            let _ = writeln!(s, "camera,{f},0,{},{},,,,,", e.translational, e.rotational);
        }
        let speeds: BTreeMap<(usize, u32), &SpeedRecord> =
            self.speeds.iter().map(|r| ((r.frame, r.label), r)).collect();
        let mut keys: Vec<(usize, u32)> = self.objects.keys().copied().collect();
        keys.extend(speeds.keys().filter(|k| !self.objects.contains_key(k)));
        keys.sort_unstable();
        for key in keys {
            let (f, l) = key;
            let (t, r) = match self.objects.get(&key) {
                Some(e) => (e.translational.to_string(), e.rotational.to_string()),
                None => (String::new(), String::new()),
            };
            match speeds.get(&key) {
                Some(sp) => {
                    let _ = writeln!(
                        s,
                        "object,{f},{l},{t},{r},{},{},{},{},{}",
                        sp.v_est,
                        sp.v_gt,
                        sp.v_est * 3.6,
                        sp.error.est_minus_gt,
                        sp.error.gt_minus_est
                    );
                }
                None => {
                    let _ = writeln!(s, "object,{f},{l},{t},{r},,,,,");
                }
            }
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let fmt = |p: Option<RmsePair>| match p {
            Some(p) => format!("{:.6} m / {:.6} rad", p.translational, p.rotational),
            None => "n/a".to_string(),
        };
        let _ = writeln!(s, "camera frames:        {}", self.camera.len());
        let _ = writeln!(s, "camera RMSE:          {}", fmt(self.camera_rmse()));
        let _ = writeln!(s, "object motions:       {}", self.objects.len());
        let _ = writeln!(s, "object RMSE:          {}", fmt(self.object_rmse()));
        match (self.mean_speed_error(), self.mean_abs_speed_error()) {
            (Some(m), Some(a)) => {
                let _ = writeln!(s, "mean speed error:     {m:.6} m/s (abs {a:.6} m/s)");
            }
            _ => {
                let _ = writeln!(s, "mean speed error:     n/a");
            }
        }
        s
    }

    /// Writes `metrics.csv` and `metrics_summary.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), DataError> {
        write_text(&dir.join("metrics.csv"), &self.to_csv())?;
        write_text(&dir.join("metrics_summary.txt"), &self.summary())
    }
}

/// Per-run reports combined by averaging their RMSEs and mean speed errors.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AggregateMetrics {
    pub runs: usize,
    pub camera: Option<RmsePair>,
    pub object: Option<RmsePair>,
    pub mean_speed_error: Option<f64>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.collect::<Option<Vec<f64>>>()?;
    if v.is_empty() {
        return None;
    }
    Some(v.iter().sum::<f64>() / v.len() as f64)
}

pub fn aggregate(reports: &[MetricsReport]) -> AggregateMetrics {
    let pair = |f: &dyn Fn(&MetricsReport) -> Option<RmsePair>| -> Option<RmsePair> {
        Some(RmsePair {
            translational: mean_of(reports.iter().map(|r| f(r).map(|p| p.translational)))?,
            rotational: mean_of(reports.iter().map(|r| f(r).map(|p| p.rotational)))?,
        })
    };
    AggregateMetrics {
        runs: reports.len(),
        camera: pair(&|r| r.camera_rmse()),
        object: pair(&|r| r.object_rmse()),
        mean_speed_error: mean_of(reports.iter().map(|r| r.mean_speed_error())),
    }
}

impl AggregateMetrics {
    pub fn summary(&self) -> String {
        let fmt = |p: Option<RmsePair>| match p {
            Some(p) => format!("{:.6} m / {:.6} rad", p.translational, p.rotational),
            None => "n/a".to_string(),
        };
        let speed = self
            .mean_speed_error
            .map(|v| format!("{v:.6} m/s"))
            .unwrap_or_else(|| "n/a".to_string());
        format!(
            "runs:                 {}\ncamera RMSE:          {}\nobject RMSE:          {}\nmean speed error:     {}\n",
            self.runs,
            fmt(self.camera),
            fmt(self.object),
            speed
        )
    }
}
