//! Rigid-body arithmetic on SE(3), pinhole projection and depth back-projection.
//!
//! Twists are ordered `[omega; v]` (rotation first) whenever they are packed
//! into a 6-vector, and pose perturbations are applied on the left:
//! `X <- exp(xi) * X`. Every Jacobian in the crate follows that convention.

use nalgebra::{Matrix2x3, Matrix3, Matrix3x6, Matrix4, Vector2, Vector3, Vector6};
use thiserror::Error;

/// Tolerance on `R^T R = I` and `det R = 1` for a valid rotation.
pub const ROTATION_TOLERANCE: f64 = 1e-9;
/// Below this rotation angle exp/log switch to their series expansions.
pub const SMALL_ANGLE: f64 = 1e-8;
/// Minimum depth accepted by [`project`].
pub const DEFAULT_MIN_DEPTH: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation angle {0} is too close to pi for a stable logarithm")]
    AngleNearPi(f64),
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("matrix is not a rotation (orthonormality drift {0:e})")]
    NonRigidRotation(f64),
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rigid transform `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose from parts, rejecting matrices that are not rotations.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let drift = rotation_drift(&rotation);
        if drift > ROTATION_TOLERANCE {
            return Err(GeometryError::NonRigidRotation(drift));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Projects `rotation` onto SO(3) when its drift is at most `max_drift`.
    pub fn from_approximate(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        max_drift: f64,
    ) -> Result<Self, GeometryError> {
        let drift = rotation_drift(&rotation);
        if !(drift <= max_drift) {
            return Err(GeometryError::NonRigidRotation(drift));
        }
        let rotation = if drift > ROTATION_TOLERANCE {
            polar_rotation(&rotation)
        } else {
            rotation
        };
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        compose(self, other)
    }

    pub fn inverse(&self) -> Pose {
        inverse(self)
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Result<Self, GeometryError> {
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    /// Geodesic rotation angle in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    pub fn is_valid(&self) -> bool {
        rotation_drift(&self.rotation) <= ROTATION_TOLERANCE && self.translation.iter().all(|x| x.is_finite())
    }

    /// Left perturbation `exp(xi) * self`.
    pub fn retract(&self, delta: &Vector6<f64>) -> Pose {
        se3_exp(&Twist::from_vector(delta)).compose(self)
    }
}

/// Largest deviation of `R^T R` from identity, or of `det R` from one.
pub fn rotation_drift(r: &Matrix3<f64>) -> f64 {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = (r.determinant() - 1.0).abs();
    ortho.max(det)
}

/// Nearest rotation in the Frobenius sense (polar decomposition).
pub fn polar_rotation(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut out = u * v_t;
    if out.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        out = u * v_t;
    }
    out
}

pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    // atan2 keeps full precision near 0 where acos of the trace does not
    let s = vee(&(r - r.transpose())).norm() * 0.5;
    let c = (r.trace() - 1.0) * 0.5;
    s.atan2(c)
}

/// Tangent coordinates of SE(3).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    pub omega: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl Twist {
    pub fn new(omega: Vector3<f64>, v: Vector3<f64>) -> Self {
        Self { omega, v }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(x: &Vector6<f64>) -> Self {
        Self {
            omega: Vector3::new(x[0], x[1], x[2]),
            v: Vector3::new(x[3], x[4], x[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.v.x,
            self.v.y,
            self.v.z,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.omega.iter().chain(self.v.iter()).all(|x| x.is_finite())
    }
}

/// Rotation exponential plus the left Jacobian `V` that maps `v` to the translation.
fn so3_exp_with_v(omega: &Vector3<f64>) -> (Matrix3<f64>, Matrix3<f64>) {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = skew(omega);
    let w2 = w * w;
    let (a, b, c) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let s = theta.sin();
        let half = (0.5 * theta).sin();
        let c = if theta < 1e-2 {
            // theta - sin(theta) cancels catastrophically here
            1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0
        } else {
            (theta - s) / (theta2 * theta)
        };
        (s / theta, 2.0 * half * half / theta2, c)
    };
    let r = Matrix3::identity() + w * a + w2 * b;
    let v = Matrix3::identity() + w * b + w2 * c;
    (r, v)
}

/// Exponential map (Rodrigues closed form).
pub fn se3_exp(xi: &Twist) -> Pose {
    let (rotation, v) = so3_exp_with_v(&xi.omega);
    Pose {
        rotation,
        translation: v * xi.v,
    }
}

/// Logarithm map; undefined near the cut locus at angle pi.
pub fn se3_log(t: &Pose) -> Result<Twist, GeometryError> {
    let r = &t.rotation;
    let theta = rotation_angle(r);
    if theta >= std::f64::consts::PI - 1e-6 {
        return Err(GeometryError::AngleNearPi(theta));
    }
    let theta2 = theta * theta;
    let axis = vee(&(r - r.transpose()));
    let omega = if theta < SMALL_ANGLE {
        axis * (0.5 * (1.0 + theta2 / 6.0))
    } else {
        axis * (theta / axis.norm())
    };
    let w = skew(&omega);
    // V^{-1} = I - w/2 + c w^2
    let c = if theta < 1e-4 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let half = (0.5 * theta).sin();
        (1.0 - theta * theta.sin() / (4.0 * half * half)) / theta2
    };
    let v_inv = Matrix3::identity() - w * 0.5 + w * w * c;
    Ok(Twist {
        omega,
        v: v_inv * t.translation,
    })
}

/// Group product `a * b`; re-orthonormalizes when the product drifts.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    let mut rotation = a.rotation * b.rotation;
    if rotation_drift(&rotation) > ROTATION_TOLERANCE {
        rotation = polar_rotation(&rotation);
    }
    Pose {
        rotation,
        translation: a.rotation * b.translation + a.translation,
    }
}

pub fn inverse(t: &Pose) -> Pose {
    let rt = t.rotation.transpose();
    Pose {
        rotation: rt,
        translation: -(rt * t.translation),
    }
}

/// Pinhole intrinsics of a rectified RGB-D / stereo camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Stereo baseline in meters (bf / fx for RGB-D rigs).
    pub baseline: f64,
    pub fps: f64,
}

impl CameraIntrinsics {
    pub fn is_valid(&self) -> bool {
        self.fx > 0.0 && self.fy > 0.0 && self.baseline > 0.0 && self.fps > 0.0
    }

    /// `fx * baseline`, the disparity scale used by the stereo residual.
    pub fn bf(&self) -> f64 {
        self.fx * self.baseline
    }
}

pub fn project(p_cam: &Vector3<f64>, k: &CameraIntrinsics) -> Result<Vector2<f64>, GeometryError> {
    project_with_min_depth(p_cam, k, DEFAULT_MIN_DEPTH)
}

pub fn project_with_min_depth(
    p_cam: &Vector3<f64>,
    k: &CameraIntrinsics,
    min_depth: f64,
) -> Result<Vector2<f64>, GeometryError> {
    if !(p_cam.z > min_depth) {
        return Err(GeometryError::BehindCamera(p_cam.z));
    }
    Ok(project_unchecked(p_cam, k))
}

#[inline]
pub(crate) fn project_unchecked(p: &Vector3<f64>, k: &CameraIntrinsics) -> Vector2<f64> {
    Vector2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy)
}

/// Projection and its derivative with respect to the camera-frame point.
pub fn project_with_jacobian(
    p: &Vector3<f64>,
    k: &CameraIntrinsics,
) -> Result<(Vector2<f64>, Matrix2x3<f64>), GeometryError> {
    let uv = project(p, k)?;
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    let j = Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * p.x * iz2,
        0.0,
        k.fy * iz,
        -k.fy * p.y * iz2,
    );
    Ok((uv, j))
}

pub fn backproject(
    uv: &Vector2<f64>,
    depth: f64,
    k: &CameraIntrinsics,
) -> Result<Vector3<f64>, GeometryError> {
    if !(depth > 0.0) {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    Ok(Vector3::new(
        (uv.x - k.cx) * depth / k.fx,
        (uv.y - k.cy) * depth / k.fy,
        depth,
    ))
}

/// Derivative of `T^{-1} p` with respect to a left perturbation of `T`
/// (`T <- exp(xi) T`), with `xi = [omega; v]`.
pub fn inverse_transform_jacobian(t: &Pose, p_world: &Vector3<f64>) -> Matrix3x6<f64> {
    // T'^{-1} p = T^{-1} exp(-xi) p ~ R^T (p - omega x p - v - t)
    let rt = t.rotation.transpose();
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(rt * skew(p_world)));
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-rt));
    j
}

/// Derivative of `T p` with respect to a left perturbation of `T`.
pub fn transform_jacobian(t: &Pose, p: &Vector3<f64>) -> Matrix3x6<f64> {
    // exp(xi) T p ~ T p + omega x (T p) + v
    let q = t.transform_point(p);
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&q)));
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    j
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use rand::Rng;

    pub fn random_twist<R: Rng>(rng: &mut R, max_angle: f64, max_trans: f64) -> Twist {
        let axis = loop {
            let a = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let n = a.norm();
            if n > 1e-3 && n <= 1.0 {
                break a / n;
            }
        };
        let angle = rng.gen_range(0.0..max_angle);
        Twist::new(
            axis * angle,
            Vector3::new(
                rng.gen_range(-max_trans..max_trans),
                rng.gen_range(-max_trans..max_trans),
                rng.gen_range(-max_trans..max_trans),
            ),
        )
    }

    pub fn random_pose<R: Rng>(rng: &mut R) -> Pose {
        se3_exp(&random_twist(rng, 3.0, 5.0))
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn unit_k() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            baseline: 0.5,
            fps: 10.0,
        }
    }

    fn kitti_like() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 721.5377,
            fy: 721.5377,
            cx: 609.5593,
            cy: 172.854,
            baseline: 0.537,
            fps: 10.0,
        }
    }

    fn max_abs_diff4(a: &Matrix4<f64>, b: &Matrix4<f64>) -> f64 {
        (a - b).abs().max()
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(se3_exp(&Twist::zero()), Pose::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let p = se3_exp(&Twist::new(Vector3::new(0.0, 0.0, FRAC_PI_2), Vector3::zeros()));
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((p.rotation - expected).abs().max() < 1e-15);
        assert_eq!(p.translation, Vector3::zeros());
        let xi = se3_log(&p).unwrap();
        assert!((xi.omega - Vector3::new(0.0, 0.0, FRAC_PI_2)).norm() < 1e-15);
        assert!(xi.v.norm() < 1e-15);
    }

    #[test]
    fn log_of_identity_is_zero() {
        assert_eq!(se3_log(&Pose::identity()).unwrap(), Twist::zero());
    }

    #[test]
    fn log_rejects_half_turn() {
        let p = se3_exp(&Twist::new(Vector3::new(std::f64::consts::PI, 0.0, 0.0), Vector3::zeros()));
        assert!(matches!(se3_log(&p), Err(GeometryError::AngleNearPi(_))));
    }

    #[test]
    fn exp_log_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let xi = random_twist(&mut rng, std::f64::consts::PI - 1e-3, 10.0);
            let pose = se3_exp(&xi);
            assert!(pose.is_valid());
            let back = se3_log(&pose).unwrap();
            let err = (back.to_vector() - xi.to_vector()).norm();
            assert!(err < 1e-9, "round trip error {err:e} for {xi:?}");
        }
    }

    #[test]
    fn exp_log_tiny_angles() {
        for &a in &[0.0, 1e-12, 1e-9, 3e-8, 1e-6, 1e-4, 1e-2] {
            let xi = Twist::new(Vector3::new(a, -a * 0.5, a * 0.25), Vector3::new(0.3, -1.0, 2.0));
            let back = se3_log(&se3_exp(&xi)).unwrap();
            assert!((back.to_vector() - xi.to_vector()).norm() < 1e-12, "angle {a}");
        }
    }

    #[test]
    fn compose_and_inverse_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let c = random_pose(&mut rng);
            assert_eq!(compose(&a, &Pose::identity()), a);
            let ab_c = compose(&compose(&a, &b), &c).to_homogeneous();
            let a_bc = compose(&a, &compose(&b, &c)).to_homogeneous();
            assert!(max_abs_diff4(&ab_c, &a_bc) < 1e-9);
            let id = compose(&a, &inverse(&a)).to_homogeneous();
            assert!(max_abs_diff4(&id, &Matrix4::identity()) < 1e-9);
            // dense homogeneous oracles
            let dense = a.to_homogeneous() * b.to_homogeneous();
            assert!(max_abs_diff4(&dense, &compose(&a, &b).to_homogeneous()) < 1e-9);
            let dense_inv = a.to_homogeneous().try_inverse().unwrap();
            assert!(max_abs_diff4(&dense_inv, &inverse(&a).to_homogeneous()) < 1e-9);
        }
    }

    #[test]
    fn inverse_of_simple_poses() {
        assert_eq!(inverse(&Pose::identity()), Pose::identity());
        let t = Pose::from_translation(Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(inverse(&t).translation, Vector3::new(-1.0, -2.0, -3.0));
        assert_eq!(inverse(&t).rotation, Matrix3::identity());
    }

    #[test]
    fn projection_examples() {
        let uv = project(&Vector3::new(0.0, 0.0, 1.0), &unit_k()).unwrap();
        assert_eq!(uv, Vector2::new(0.0, 0.0));
        let k = CameraIntrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 50.0,
            cy: 50.0,
            ..unit_k()
        };
        assert_eq!(project(&Vector3::new(1.0, 2.0, 2.0), &k).unwrap(), Vector2::new(100.0, 150.0));
        assert!(matches!(
            project(&Vector3::new(0.0, 0.0, 1e-4), &k),
            Err(GeometryError::BehindCamera(_))
        ));
        assert!(project(&Vector3::new(0.0, 0.0, -1.0), &k).is_err());
    }

    #[test]
    fn backprojection_examples() {
        let k = kitti_like();
        let p = backproject(&Vector2::new(k.cx, k.cy), 7.5, &k).unwrap();
        assert_eq!(p, Vector3::new(0.0, 0.0, 7.5));
        assert_eq!(
            backproject(&Vector2::new(0.0, 0.0), 1.0, &unit_k()).unwrap(),
            Vector3::new(0.0, 0.0, 1.0)
        );
        assert!(matches!(
            backproject(&Vector2::new(0.0, 0.0), 0.0, &k),
            Err(GeometryError::NonPositiveDepth(_))
        ));
    }

    #[test]
    fn projection_round_trip() {
        let k = kitti_like();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let z = rng.gen_range(0.5..80.0);
            let p = Vector3::new(rng.gen_range(-0.8..0.8) * z, rng.gen_range(-0.25..0.25) * z, z);
            let uv = project(&p, &k).unwrap();
            let back = backproject(&uv, p.z, &k).unwrap();
            assert!((back - p).norm() < 1e-9 * p.z.max(1.0));
        }
    }

    #[test]
    fn from_approximate_repairs_small_drift() {
        let mut r = Matrix3::identity();
        r[(0, 1)] = 1e-5;
        let p = Pose::from_approximate(r, Vector3::zeros(), 1e-3).unwrap();
        assert!(rotation_drift(&p.rotation) < 1e-12);
        let mut flip = Matrix3::identity();
        flip[(2, 2)] = -1.0;
        assert!(Pose::from_approximate(flip, Vector3::zeros(), 1e-3).is_err());
    }

    fn central_difference<F: Fn(&Vector6<f64>) -> Vector3<f64>>(f: F) -> Matrix3x6<f64> {
        let h = 1e-6;
        let mut j = Matrix3x6::zeros();
        for i in 0..6 {
            let mut d = Vector6::zeros();
            d[i] = h;
            let col = (f(&d) - f(&-d)) / (2.0 * h);
            j.set_column(i, &col);
        }
        j
    }

    fn rel_err<const R: usize, const C: usize>(
        a: &nalgebra::SMatrix<f64, R, C>,
        b: &nalgebra::SMatrix<f64, R, C>,
    ) -> f64 {
        (a - b).norm() / b.norm().max(1.0)
    }

    #[test]
    fn point_transform_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let t = random_pose(&mut rng);
            let p = Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            let num = central_difference(|d| t.retract(d).inverse().transform_point(&p));
            assert!(rel_err(&inverse_transform_jacobian(&t, &p), &num) < 1e-5);
            let num = central_difference(|d| t.retract(d).transform_point(&p));
            assert!(rel_err(&transform_jacobian(&t, &p), &num) < 1e-5);
        }
    }

    #[test]
    fn projection_through_pose_jacobian_matches_finite_differences() {
        let k = kitti_like();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            let twist = random_twist(&mut rng, 0.3, 1.0);
            let x = se3_exp(&twist);
            let z = rng.gen_range(2.0..30.0);
            let p_cam = Vector3::new(rng.gen_range(-0.5..0.5) * z, rng.gen_range(-0.2..0.2) * z, z);
            let p_world = x.transform_point(&p_cam);
            let (_, jp) = project_with_jacobian(&p_cam, &k).unwrap();
            let analytic = jp * inverse_transform_jacobian(&x, &p_world);
            let h = 1e-6;
            let mut num = nalgebra::Matrix2x6::zeros();
            for i in 0..6 {
                let mut d = Vector6::zeros();
                d[i] = h;
                let f = |d: &Vector6<f64>| project(&x.retract(d).inverse().transform_point(&p_world), &k).unwrap();
                num.set_column(i, &((f(&d) - f(&-d)) / (2.0 * h)));
            }
            assert!(rel_err(&analytic, &num) < 1e-5, "{}", rel_err(&analytic, &num));
        }
    }
}
