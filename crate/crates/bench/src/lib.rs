//! Fixtures shared by the benchmarks.

use dynslam::geometry::{project, se3_exp, CameraIntrinsics, Pose, Twist};
use dynslam::synth::{generate_scene, SceneSpec, SyntheticScene};
use nalgebra::{Vector2, Vector3};

/// The standard scene cut to `frames` frames.
pub fn scene(frames: usize) -> SyntheticScene {
    let mut spec = SceneSpec::standard();
    spec.frames = frames;
    generate_scene(&spec).expect("standard scene")
}

/// A camera pose a short step away from the identity.
pub fn moved_pose() -> Pose {
    se3_exp(&Twist {
        omega: Vector3::new(0.01, -0.02, 0.005),
        v: Vector3::new(0.1, -0.05, 0.3),
    })
}

/// `n` world points on a grid of depths seen from `pose`, paired with their
/// projections. Every `outlier_every`-th observation is shifted 40 px.
pub fn pnp_set(pose: &Pose, k: &CameraIntrinsics, n: usize, outlier_every: usize) -> Vec<(Vector3<f64>, Vector2<f64>)> {
    (0..n)
        .map(|i| {
            let z = 4.0 + (i % 7) as f64 * 3.0;
            let u = ((i * 37) % 600) as f64 + 20.0;
            let v = ((i * 53) % 180) as f64 + 10.0;
            let cam = Vector3::new((u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z);
            let world = pose.transform_point(&cam);
            let mut uv = project(&cam, k).expect("in front");
            if outlier_every > 0 && i % outlier_every == 0 {
                uv += Vector2::new(40.0, -25.0);
            }
            (world, uv)
        })
        .collect()
}
