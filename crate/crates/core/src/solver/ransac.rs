//! PnP inside RANSAC with an iterative minimal solver.

use nalgebra::{Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{lm_minimize, FixedPointReprojection, LeastSquaresProblem, LmConfig, RobustKernel, SolverError};
use crate::geometry::{project, CameraIntrinsics, Pose};

pub const MINIMAL_SAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct PnpParams {
    pub iterations: usize,
    pub pixel_threshold: f64,
    pub seed: u64,
    /// Starting pose for every minimal solve.
    pub initial: Pose,
    pub min_inliers: usize,
    pub minimal_iterations: usize,
}

impl PnpParams {
    pub fn new(iterations: usize, pixel_threshold: f64, seed: u64) -> Self {
        Self {
            iterations,
            pixel_threshold,
            seed,
            initial: Pose::identity(),
            min_inliers: 6,
            minimal_iterations: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnpResult {
    /// Camera-to-world pose.
    pub pose: Pose,
    pub inliers: Vec<bool>,
    pub num_inliers: usize,
}

fn reprojection_error(pose: &Pose, world: &Vector3<f64>, uv: &Vector2<f64>, k: &CameraIntrinsics) -> f64 {
    project(&pose.inverse().transform_point(world), k)
        .map(|p| (p - uv).norm())
        .unwrap_or(f64::INFINITY)
}

/// Inlier mask, count and inlier squared-error sum of a hypothesis.
fn consensus(pose: &Pose, corrs: &[(Vector3<f64>, Vector2<f64>)], k: &CameraIntrinsics, threshold: f64) -> (Vec<bool>, usize, f64) {
    let mut mask = Vec::with_capacity(corrs.len());
    let mut count = 0;
    let mut cost = 0.0;
    for (w, uv) in corrs {
        let e = reprojection_error(pose, w, uv, k);
        let inlier = e < threshold;
        if inlier {
            count += 1;
            cost += e * e;
        }
        mask.push(inlier);
    }
    (mask, count, cost)
}

fn fit(
    initial: Pose,
    corrs: impl Iterator<Item = (Vector3<f64>, Vector2<f64>)>,
    k: &CameraIntrinsics,
    max_iterations: usize,
) -> Option<Pose> {
    let mut problem = LeastSquaresProblem::new();
    let x = problem.add_pose(initial, false);
    for (w, uv) in corrs {
        problem
            .add_residual(Box::new(FixedPointReprojection::new(x, w, uv, *k, RobustKernel::None)))
            .ok()?;
    }
    let config = LmConfig {
        max_iterations,
        ..LmConfig::default()
    };
    lm_minimize(&mut problem, &config).ok()?;
    Some(problem.pose(x))
}

/// Robust camera pose from world-to-pixel correspondences.
///
/// Every hypothesis comes from a random 4-point sample refined by LM from
/// `params.initial`. Hypotheses are ranked by inlier count, then by the
/// inlier squared error, then by sampling order; the winner is refit on all
/// of its inliers. Deterministic for a given seed.
pub fn ransac_pnp(
    corrs: &[(Vector3<f64>, Vector2<f64>)],
    k: &CameraIntrinsics,
    params: &PnpParams,
) -> Result<PnpResult, SolverError> {
    if corrs.len() < MINIMAL_SAMPLE {
        return Err(SolverError::TooFewCorrespondences(corrs.len(), MINIMAL_SAMPLE));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(usize, f64, Pose)> = None;
    for _ in 0..params.iterations {
        let idx = sample(&mut rng, corrs.len(), MINIMAL_SAMPLE);
        let Some(pose) = fit(params.initial, idx.iter().map(|i| corrs[i]), k, params.minimal_iterations) else {
            continue;
        };
        let (_, count, cost) = consensus(&pose, corrs, k, params.pixel_threshold);
        let better = match &best {
            None => true,
            Some((c, e, _)) => count > *c || (count == *c && cost < *e),
        };
        if better {
            best = Some((count, cost, pose));
        }
    }
    let Some((count, _, pose)) = best else {
        return Err(SolverError::NoConsensus(0));
    };
    if count < params.min_inliers {
        return Err(SolverError::NoConsensus(count));
    }
    let (mask, _, _) = consensus(&pose, corrs, k, params.pixel_threshold);
    let refined = fit(
        pose,
        corrs.iter().zip(&mask).filter(|(_, m)| **m).map(|(c, _)| *c),
        k,
        100,
    )
    .unwrap_or(pose);
    let (inliers, num_inliers, _) = consensus(&refined, corrs, k, params.pixel_threshold);
    // keep the hypothesis if the refit lost support
    if num_inliers < count {
        return Ok(PnpResult {
            pose,
            inliers: mask,
            num_inliers: count,
        });
    }
    Ok(PnpResult {
        pose: refined,
        inliers,
        num_inliers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::test_support::random_twist;
    use crate::geometry::se3_exp;
    use rand::Rng;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 500.0,
            fy: 500.0,
            cx: 320.0,
            cy: 240.0,
            baseline: 0.5,
            fps: 10.0,
        }
    }

    fn scene(rng: &mut ChaCha8Rng, truth: &Pose, n: usize, outlier_fraction: f64) -> (Vec<(Vector3<f64>, Vector2<f64>)>, Vec<bool>) {
        let mut corrs = Vec::new();
        let mut good = Vec::new();
        for _ in 0..n {
            let z = rng.gen_range(4.0..20.0);
            let p_cam = Vector3::new(rng.gen_range(-0.6..0.6) * z, rng.gen_range(-0.45..0.45) * z, z);
            let mut uv = project(&p_cam, &k()).unwrap();
            let outlier = rng.gen_bool(outlier_fraction);
            if outlier {
                uv = Vector2::new(rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0));
            }
            corrs.push((truth.transform_point(&p_cam), uv));
            good.push(!outlier);
        }
        (corrs, good)
    }

    #[test]
    fn exact_correspondences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let truth = se3_exp(&random_twist(&mut rng, 0.2, 0.5));
        let (corrs, _) = scene(&mut rng, &truth, 60, 0.0);
        let r = ransac_pnp(&corrs, &k(), &PnpParams::new(50, 2.0, 1)).unwrap();
        assert!(r.inliers.iter().all(|&m| m));
        assert!((r.pose.translation - truth.translation).norm() < 1e-6);
        assert!(r.pose.compose(&truth.inverse()).rotation_angle() < 1e-6);
    }

    #[test]
    fn too_few_correspondences() {
        let corrs = vec![(Vector3::new(0.0, 0.0, 5.0), Vector2::new(320.0, 240.0)); 3];
        assert_eq!(
            ransac_pnp(&corrs, &k(), &PnpParams::new(10, 2.0, 0)),
            Err(SolverError::TooFewCorrespondences(3, 4))
        );
    }

    #[test]
    fn same_seed_same_answer() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth = se3_exp(&random_twist(&mut rng, 0.2, 0.5));
        let (corrs, _) = scene(&mut rng, &truth, 80, 0.3);
        let a = ransac_pnp(&corrs, &k(), &PnpParams::new(100, 2.0, 42)).unwrap();
        let b = ransac_pnp(&corrs, &k(), &PnpParams::new(100, 2.0, 42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn outliers_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let truth = se3_exp(&random_twist(&mut rng, 0.2, 0.5));
        let (corrs, good) = scene(&mut rng, &truth, 100, 0.3);
        let r = ransac_pnp(&corrs, &k(), &PnpParams::new(200, 2.0, 3)).unwrap();
        assert!((r.pose.translation - truth.translation).norm() < 1e-3);
        for (m, g) in r.inliers.iter().zip(&good) {
            if !g {
                // a random pixel can land near the true projection by chance
                continue;
            }
            assert!(m);
        }
    }
}
