//! Residual blocks shared by the tracking front-end and the batch back-end.
//! Residuals are `predicted - observed`.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Vector2, Vector3};

use super::{ResidualBlock, RobustKernel, VarId, Variable};
use crate::geometry::{
    inverse_transform_jacobian, project_with_jacobian, skew, transform_jacobian, CameraIntrinsics,
};

fn dmat<const R: usize, const C: usize>(m: &nalgebra::SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

fn dvec2(v: &Vector2<f64>) -> DVector<f64> {
    DVector::from_column_slice(v.as_slice())
}

/// Camera reprojection of a constant world point (pose-only problems).
pub struct FixedPointReprojection {
    vars: [VarId; 1],
    world: Vector3<f64>,
    observed: Vector2<f64>,
    intrinsics: CameraIntrinsics,
    kernel: RobustKernel,
}

impl FixedPointReprojection {
    pub fn new(
        camera: VarId,
        world: Vector3<f64>,
        observed: Vector2<f64>,
        intrinsics: CameraIntrinsics,
        kernel: RobustKernel,
    ) -> Self {
        Self {
            vars: [camera],
            world,
            observed,
            intrinsics,
            kernel,
        }
    }
}

impl ResidualBlock for FixedPointReprojection {
    fn variables(&self) -> &[VarId] {
        &self.vars
    }
    fn dim(&self) -> usize {
        2
    }
    fn kernel(&self) -> RobustKernel {
        self.kernel
    }
    fn residual(&self, v: &[&Variable]) -> Option<DVector<f64>> {
        let p = v[0].as_pose().inverse().transform_point(&self.world);
        let uv = crate::geometry::project(&p, &self.intrinsics).ok()?;
        Some(dvec2(&(uv - self.observed)))
    }
    fn linearize(&self, v: &[&Variable]) -> Option<(DVector<f64>, Vec<DMatrix<f64>>)> {
        let x = v[0].as_pose();
        let p = x.inverse().transform_point(&self.world);
        let (uv, jp) = project_with_jacobian(&p, &self.intrinsics).ok()?;
        let jx = jp * inverse_transform_jacobian(x, &self.world);
        Some((dvec2(&(uv - self.observed)), vec![dmat(&jx)]))
    }
}

/// Reprojection of a point variable into a camera variable (`pi(X^-1 P)`).
pub struct CameraReprojection {
    vars: [VarId; 2],
    observed: Vector2<f64>,
    intrinsics: CameraIntrinsics,
    kernel: RobustKernel,
}

impl CameraReprojection {
    pub fn new(
        camera: VarId,
        point: VarId,
        observed: Vector2<f64>,
        intrinsics: CameraIntrinsics,
        kernel: RobustKernel,
    ) -> Self {
        Self {
            vars: [camera, point],
            observed,
            intrinsics,
            kernel,
        }
    }
}

fn camera_point_linearization(
    v: &[&Variable],
    k: &CameraIntrinsics,
) -> Option<(Vector2<f64>, Matrix2x3<f64>, Vector3<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let x = v[0].as_pose();
    let pw = v[1].as_point();
    let p = x.inverse().transform_point(pw);
    let (uv, jp) = project_with_jacobian(&p, k).ok()?;
    let jx = jp * inverse_transform_jacobian(x, pw);
    let jpt = jp * x.rotation.transpose();
    Some((uv, jp, p, dmat(&jx), dmat(&jpt)))
}

impl ResidualBlock for CameraReprojection {
    fn variables(&self) -> &[VarId] {
        &self.vars
    }
    fn dim(&self) -> usize {
        2
    }
    fn kernel(&self) -> RobustKernel {
        self.kernel
    }
    fn residual(&self, v: &[&Variable]) -> Option<DVector<f64>> {
        let p = v[0].as_pose().inverse().transform_point(v[1].as_point());
        let uv = crate::geometry::project(&p, &self.intrinsics).ok()?;
        Some(dvec2(&(uv - self.observed)))
    }
    fn linearize(&self, v: &[&Variable]) -> Option<(DVector<f64>, Vec<DMatrix<f64>>)> {
        let (uv, _, _, jx, jpt) = camera_point_linearization(v, &self.intrinsics)?;
        Some((dvec2(&(uv - self.observed)), vec![jx, jpt]))
    }
}

/// RGB-D observation as a rectified stereo measurement `(u, v, u - bf/z)`;
/// the third row carries the measured depth and fixes metric scale.
pub struct StereoReprojection {
    vars: [VarId; 2],
    observed: Vector3<f64>,
    intrinsics: CameraIntrinsics,
    kernel: RobustKernel,
    disparity_weight: f64,
}

impl StereoReprojection {
    pub fn new(
        camera: VarId,
        point: VarId,
        observed: Vector2<f64>,
        depth: f64,
        intrinsics: CameraIntrinsics,
        kernel: RobustKernel,
    ) -> Self {
        Self {
            vars: [camera, point],
            observed: Vector3::new(observed.x, observed.y, observed.x - intrinsics.bf() / depth),
            intrinsics,
            kernel,
            disparity_weight: 1.0,
        }
    }

    /// Scales the disparity part `u - u_R` of the third row.
    pub fn with_disparity_weight(mut self, weight: f64) -> Self {
        self.disparity_weight = weight;
        self
    }

    fn weighted(&self, mut r: Vector3<f64>) -> Vector3<f64> {
        r[2] = r[0] + self.disparity_weight * (r[2] - r[0]);
        r
    }

    fn predict(&self, uv: &Vector2<f64>, p: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(uv.x, uv.y, uv.x - self.intrinsics.bf() / p.z)
    }
}

impl ResidualBlock for StereoReprojection {
    fn variables(&self) -> &[VarId] {
        &self.vars
    }
    fn dim(&self) -> usize {
        3
    }
    fn kernel(&self) -> RobustKernel {
        self.kernel
    }
    fn residual(&self, v: &[&Variable]) -> Option<DVector<f64>> {
        let p = v[0].as_pose().inverse().transform_point(v[1].as_point());
        let uv = crate::geometry::project(&p, &self.intrinsics).ok()?;
        Some(DVector::from_column_slice(self.weighted(self.predict(&uv, &p) - self.observed).as_slice()))
    }
    fn linearize(&self, v: &[&Variable]) -> Option<(DVector<f64>, Vec<DMatrix<f64>>)> {
        let x = v[0].as_pose();
        let pw = v[1].as_point();
        let p = x.inverse().transform_point(pw);
        let (uv, jp) = project_with_jacobian(&p, &self.intrinsics).ok()?;
        let bf = self.intrinsics.bf();
        let mut j3 = Matrix3::zeros();
        j3.fixed_view_mut::<2, 3>(0, 0).copy_from(&jp);
        j3.set_row(
            2,
            &(jp.row(0) + nalgebra::RowVector3::new(0.0, 0.0, self.disparity_weight * bf / (p.z * p.z))),
        );
        let jx = j3 * inverse_transform_jacobian(x, pw);
        let jpt = j3 * x.rotation.transpose();
        let r = self.weighted(self.predict(&uv, &p) - self.observed);
        Some((DVector::from_column_slice(r.as_slice()), vec![dmat(&jx), dmat(&jpt)]))
    }
}

/// Reprojection of an object point carried by an object motion:
/// `pi(X^-1 O P)` against the observation in the later frame.
pub struct ObjectReprojection {
    vars: [VarId; 3],
    observed: Vector2<f64>,
    intrinsics: CameraIntrinsics,
    kernel: RobustKernel,
}

impl ObjectReprojection {
    /// Variables are (camera at k, motion k-1 -> k, point at k-1).
    pub fn new(
        camera: VarId,
        motion: VarId,
        point: VarId,
        observed: Vector2<f64>,
        intrinsics: CameraIntrinsics,
        kernel: RobustKernel,
    ) -> Self {
        Self {
            vars: [camera, motion, point],
            observed,
            intrinsics,
            kernel,
        }
    }
}

impl ResidualBlock for ObjectReprojection {
    fn variables(&self) -> &[VarId] {
        &self.vars
    }
    fn dim(&self) -> usize {
        2
    }
    fn kernel(&self) -> RobustKernel {
        self.kernel
    }
    fn residual(&self, v: &[&Variable]) -> Option<DVector<f64>> {
        let q = v[1].as_pose().transform_point(v[2].as_point());
        let p = v[0].as_pose().inverse().transform_point(&q);
        let uv = crate::geometry::project(&p, &self.intrinsics).ok()?;
        Some(dvec2(&(uv - self.observed)))
    }
    fn linearize(&self, v: &[&Variable]) -> Option<(DVector<f64>, Vec<DMatrix<f64>>)> {
        let x = v[0].as_pose();
        let o = v[1].as_pose();
        let pw = v[2].as_point();
        let q = o.transform_point(pw);
        let p = x.inverse().transform_point(&q);
        let (uv, jp) = project_with_jacobian(&p, &self.intrinsics).ok()?;
        let rxt = x.rotation.transpose();
        let jx = jp * inverse_transform_jacobian(x, &q);
        let jo = jp * rxt * transform_jacobian(o, pw);
        let jpt = jp * rxt * o.rotation;
        Some((dvec2(&(uv - self.observed)), vec![dmat(&jx), dmat(&jo), dmat(&jpt)]))
    }
}

/// Point-motion consistency `P_k - O P_{k-1}` (3-D, meters).
pub struct PointMotion {
    vars: [VarId; 3],
    weight: f64,
}

impl PointMotion {
    /// Variables are (motion k-1 -> k, point at k-1, point at k).
    pub fn new(motion: VarId, previous: VarId, current: VarId, weight: f64) -> Self {
        Self {
            vars: [motion, previous, current],
            weight,
        }
    }
}

impl ResidualBlock for PointMotion {
    fn variables(&self) -> &[VarId] {
        &self.vars
    }
    fn dim(&self) -> usize {
        3
    }
    fn residual(&self, v: &[&Variable]) -> Option<DVector<f64>> {
        let r = (v[2].as_point() - v[0].as_pose().transform_point(v[1].as_point())) * self.weight;
        Some(DVector::from_column_slice(r.as_slice()))
    }
    fn linearize(&self, v: &[&Variable]) -> Option<(DVector<f64>, Vec<DMatrix<f64>>)> {
        let o = v[0].as_pose();
        let prev = v[1].as_point();
        let w = self.weight;
        let jo = transform_jacobian(o, prev) * -w;
        let jprev = o.rotation * -w;
        let jcur = Matrix3::identity() * w;
        Some((self.residual(v)?, vec![dmat(&jo), dmat(&jprev), dmat(&jcur)]))
    }
}

/// Penalizes change between consecutive motions of one object:
/// `w [vec(R_a - R_b); t_a - t_b]`.
pub struct MotionSmoothness {
    vars: [VarId; 2],
    weight: f64,
}

impl MotionSmoothness {
    pub fn new(earlier: VarId, later: VarId, weight: f64) -> Self {
        Self {
            vars: [earlier, later],
            weight,
        }
    }
}

fn smoothness_jacobian(r: &Matrix3<f64>, t: &Vector3<f64>, sign: f64) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(12, 6);
    for i in 0..3 {
        let dr = skew(&Vector3::ith(i, 1.0)) * r;
        for (k, x) in dr.iter().enumerate() {
            j[(k, i)] = sign * x;
        }
    }
    let dt = -skew(t);
    for row in 0..3 {
        for col in 0..3 {
            j[(9 + row, col)] = sign * dt[(row, col)];
        }
        j[(9 + row, 3 + row)] = sign;
    }
    j
}

impl ResidualBlock for MotionSmoothness {
    fn variables(&self) -> &[VarId] {
        &self.vars
    }
    fn dim(&self) -> usize {
        12
    }
    fn residual(&self, v: &[&Variable]) -> Option<DVector<f64>> {
        let a = v[0].as_pose();
        let b = v[1].as_pose();
        let mut r = DVector::zeros(12);
        for (k, x) in (a.rotation - b.rotation).iter().enumerate() {
            r[k] = *x;
        }
        for i in 0..3 {
            r[9 + i] = a.translation[i] - b.translation[i];
        }
        Some(r * self.weight)
    }
    fn linearize(&self, v: &[&Variable]) -> Option<(DVector<f64>, Vec<DMatrix<f64>>)> {
        let a = v[0].as_pose();
        let b = v[1].as_pose();
        let w = self.weight;
        Some((
            self.residual(v)?,
            vec![
                smoothness_jacobian(&a.rotation, &a.translation, w),
                smoothness_jacobian(&b.rotation, &b.translation, -w),
            ],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::test_support::random_twist;
    use crate::geometry::{se3_exp, Pose};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 480.0,
            fy: 470.0,
            cx: 320.0,
            cy: 100.0,
            baseline: 0.5,
            fps: 10.0,
        }
    }

    /// Central differences (step 1e-6) through each variable's retraction.
    fn numeric_jacobians(block: &dyn ResidualBlock, values: &[Variable]) -> Vec<DMatrix<f64>> {
        let h = 1e-6;
        values
            .iter()
            .enumerate()
            .map(|(vi, var)| {
                let mut j = DMatrix::zeros(block.dim(), var.dof());
                for c in 0..var.dof() {
                    let mut d = vec![0.0; var.dof()];
                    let eval = |sign: f64, d: &mut Vec<f64>| {
                        d[c] = sign * h;
                        let mut vals = values.to_vec();
                        vals[vi] = var.retract(d);
                        let refs: Vec<&Variable> = vals.iter().collect();
                        block.residual(&refs).unwrap()
                    };
                    let plus = eval(1.0, &mut d);
                    let minus = eval(-1.0, &mut d);
                    j.set_column(c, &((plus - minus) / (2.0 * h)));
                }
                j
            })
            .collect()
    }

    fn check(block: &dyn ResidualBlock, values: &[Variable]) {
        let refs: Vec<&Variable> = values.iter().collect();
        let (r, analytic) = block.linearize(&refs).unwrap();
        assert_eq!(r, block.residual(&refs).unwrap());
        assert_eq!(r.len(), block.dim());
        let numeric = numeric_jacobians(block, values);
        for (a, n) in analytic.iter().zip(&numeric) {
            let rel = (a - n).norm() / n.norm().max(1.0);
            assert!(rel < 1e-5, "relative Jacobian error {rel:e}\n{a}\n{n}");
        }
    }

    struct States {
        rng: ChaCha8Rng,
    }

    impl States {
        fn pose(&mut self) -> Pose {
            se3_exp(&random_twist(&mut self.rng, 1.0, 2.0))
        }
        /// A world point in front of `camera`.
        fn visible_point(&mut self, camera: &Pose) -> Vector3<f64> {
            let z = self.rng.gen_range(2.0..30.0);
            camera.transform_point(&Vector3::new(
                self.rng.gen_range(-0.5..0.5) * z,
                self.rng.gen_range(-0.3..0.3) * z,
                z,
            ))
        }
        fn obs(&mut self) -> Vector2<f64> {
            Vector2::new(self.rng.gen_range(0.0..640.0), self.rng.gen_range(0.0..200.0))
        }
    }

    #[test]
    fn analytic_jacobians_match_central_differences() {
        let mut s = States {
            rng: ChaCha8Rng::seed_from_u64(77),
        };
        for _ in 0..100 {
            let x = s.pose();
            let p = s.visible_point(&x);
            let obs = s.obs();
            check(
                &FixedPointReprojection::new(0, p, obs, k(), RobustKernel::None),
                &[Variable::Pose(x)],
            );
            check(
                &CameraReprojection::new(0, 1, obs, k(), RobustKernel::None),
                &[Variable::Pose(x), Variable::Point(p)],
            );
            check(
                &StereoReprojection::new(0, 1, obs, 7.0, k(), RobustKernel::Huber(2.0)),
                &[Variable::Pose(x), Variable::Point(p)],
            );
            check(
                &StereoReprojection::new(0, 1, obs, 7.0, k(), RobustKernel::None).with_disparity_weight(4.0),
                &[Variable::Pose(x), Variable::Point(p)],
            );
            let o = se3_exp(&random_twist(&mut s.rng, 0.2, 1.0));
            let prev = o.inverse().transform_point(&p);
            check(
                &ObjectReprojection::new(0, 1, 2, obs, k(), RobustKernel::None),
                &[Variable::Pose(x), Variable::Pose(o), Variable::Point(prev)],
            );
            let cur = p + Vector3::new(0.1, -0.2, 0.3);
            check(
                &PointMotion::new(0, 1, 2, 2.0),
                &[Variable::Pose(o), Variable::Point(prev), Variable::Point(cur)],
            );
            check(
                &MotionSmoothness::new(0, 1, 0.5),
                &[Variable::Pose(o), Variable::Pose(s.pose())],
            );
        }
    }

    #[test]
    fn residuals_vanish_at_truth() {
        let mut s = States {
            rng: ChaCha8Rng::seed_from_u64(1),
        };
        let x = s.pose();
        let o = s.pose();
        let cur = s.visible_point(&x);
        let prev = o.inverse().transform_point(&cur);
        let pc = x.inverse().transform_point(&cur);
        let uv = crate::geometry::project(&pc, &k()).unwrap();
        let vals = [Variable::Pose(x), Variable::Pose(o), Variable::Point(prev)];
        let refs: Vec<&Variable> = vals.iter().collect();
        let r = ObjectReprojection::new(0, 1, 2, uv, k(), RobustKernel::None)
            .residual(&refs)
            .unwrap();
        assert!(r.norm() < 1e-9);
        let vals = [Variable::Pose(x), Variable::Point(cur)];
        let refs: Vec<&Variable> = vals.iter().collect();
        let r = StereoReprojection::new(0, 1, uv, pc.z, k(), RobustKernel::None)
            .residual(&refs)
            .unwrap();
        assert!(r.norm() < 1e-9);
    }

    #[test]
    fn disparity_weight_scales_only_the_disparity_part() {
        let x = Pose::identity();
        let p = Vector3::new(1.0, -0.5, 12.0);
        let obs = Vector2::new(300.0, 90.0);
        let vals = [Variable::Pose(x), Variable::Point(p)];
        let refs: Vec<&Variable> = vals.iter().collect();
        let plain = StereoReprojection::new(0, 1, obs, 10.0, k(), RobustKernel::None);
        let r1 = plain.residual(&refs).unwrap();
        let r3 = plain.with_disparity_weight(3.0).residual(&refs).unwrap();
        assert_eq!(r1[0], r3[0]);
        assert_eq!(r1[1], r3[1]);
        let bf = k().bf();
        let disparity_err = bf / 10.0 - bf / 12.0;
        assert!((r1[2] - r1[0] - disparity_err).abs() < 1e-9);
        assert!((r3[2] - r3[0] - 3.0 * disparity_err).abs() < 1e-9);
    }
}
