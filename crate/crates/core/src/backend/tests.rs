use super::*;
use crate::frontend::ObjectFrame;
use crate::geometry::test_support::random_twist;
use crate::geometry::{project, se3_exp, Twist};
use crate::synth::{generate_scene, Owner, SceneSpec, SyntheticScene};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn short_scene(frames: usize) -> SyntheticScene {
    let mut spec = SceneSpec::standard();
    spec.frames = frames;
    generate_scene(&spec).unwrap()
}

/// Frame states built straight from the exact scene: every `stride`-th pixel
/// of frame k-1 is moved with its true motion and projected into frame k.
fn oracle_states(scene: &SyntheticScene, stride: usize, with_objects: bool) -> Vec<FrameState> {
    let k = scene.settings.intrinsics;
    let (w, h) = (scene.spec.width, scene.spec.height);
    let mut states = Vec::new();
    for f in 0..scene.frames.len() {
        let mut s = FrameState {
            index: f,
            camera_pose: scene.camera_poses[f],
            objects: BTreeMap::new(),
            decisions: BTreeMap::new(),
            labels: BTreeMap::new(),
            static_points: Vec::new(),
            dynamic_points: Vec::new(),
            static_steps: Vec::new(),
            static_inliers: 0,
            camera_model: None,
            reports: Vec::new(),
        };
        if f > 0 {
            let exact = &scene.exact[f - 1];
            let (xp, xc) = (scene.camera_poses[f - 1], scene.camera_poses[f]);
            let mut per_object: BTreeMap<u32, Vec<(StepObservation, Vector3<f64>)>> = BTreeMap::new();
            let mut track = 0;
            for y in (0..h).step_by(stride) {
                for x in (0..w).step_by(stride) {
                    let d = exact.depth[y * w + x];
                    if d <= 0.0 || d > 25.0 {
                        continue;
                    }
                    let uv_prev = Vector2::new(x as f64, y as f64);
                    let world = xp.transform_point(&backproject(&uv_prev, d, &k).unwrap());
                    let (moved, label) = match exact.owner[y * w + x] {
                        Owner::Static => (world, 0),
                        Owner::Object(i) if with_objects => {
                            let label = scene.spec.objects[i].label;
                            let o = scene.object_motion(label, f).unwrap();
                            if o.translation.norm() < 1e-9 {
                                continue;
                            }
                            (o.transform_point(&world), label)
                        }
                        _ => continue,
                    };
                    let c = xc.inverse().transform_point(&moved);
                    let Ok(uv) = project(&c, &k) else { continue };
                    if uv.x < 0.0 || uv.y < 0.0 || uv.x > (w - 1) as f64 || uv.y > (h - 1) as f64 {
                        continue;
                    }
                    track += 1;
                    let step = StepObservation {
                        track_id: track,
                        uv_prev,
                        depth_prev: d,
                        uv,
                        depth: Some(c.z),
                    };
                    if label == 0 {
                        s.static_steps.push(step);
                    } else {
                        per_object.entry(label).or_default().push((step, world));
                    }
                }
            }
            for (label, v) in per_object {
                if v.len() < 6 {
                    continue;
                }
                let motion = scene.object_motion(label, f).unwrap();
                s.objects.insert(
                    label,
                    ObjectFrame {
                        motion,
                        points_prev: v.iter().map(|(_, p)| *p).collect(),
                        steps: v.into_iter().map(|(s, _)| s).collect(),
                        centroid: Vector3::zeros(),
                        speed: 0.0,
                        mask_id: label,
                    },
                );
            }
        }
        states.push(s);
    }
    states
}

fn settings() -> Settings {
    SceneSpec::standard().settings()
}

#[test]
fn motion_only_keeps_optimum_and_restores_perturbation() {
    let scene = short_scene(2);
    let states = oracle_states(&scene, 12, false);
    let k = scene.settings.intrinsics;
    let pairs: Vec<(Vector3<f64>, Vector2<f64>)> =
        states[1].static_steps.iter().map(|s| (step_point(&scene.camera_poses[0], s, &k), s.uv)).collect();
    let truth = scene.camera_poses[1];
    let (same, _) = motion_only_ba(&truth, &pairs, &k, &settings()).unwrap();
    assert!((same.translation - truth.translation).norm() < 1e-10);
    assert!(same.compose(&truth.inverse()).rotation_angle() < 1e-10);

    let delta = Twist::new(Vector3::new(0.05, 0.0, 0.0).normalize() * 0.05, Vector3::new(0.03, 0.03, 0.03));
    let start = se3_exp(&delta).compose(&truth);
    let (fixed, report) = motion_only_ba(&start, &pairs, &k, &settings()).unwrap();
    assert!(report.is_monotone());
    assert!((fixed.translation - truth.translation).norm() < 1e-6);
    assert!(fixed.compose(&truth.inverse()).rotation_angle() < 1e-6);
}

#[test]
fn motion_only_with_outliers_removed() {
    let scene = short_scene(2);
    let states = oracle_states(&scene, 12, false);
    let k = scene.settings.intrinsics;
    let s = settings();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut pairs = Vec::new();
    let mut flagged = Vec::new();
    for st in &states[1].static_steps {
        let outlier = rng.gen_bool(0.3);
        let uv = if outlier {
            Vector2::new(rng.gen_range(0.0..640.0), rng.gen_range(0.0..200.0))
        } else {
            st.uv + Vector2::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5))
        };
        pairs.push((step_point(&scene.camera_poses[0], st, &k), uv));
        flagged.push(outlier);
    }
    let inliers: Vec<_> = pairs.iter().zip(&flagged).filter(|(_, o)| !**o).map(|(p, _)| *p).collect();
    let (pose, _) = motion_only_ba(&scene.camera_poses[0], &inliers, &k, &s).unwrap();
    let mean = inliers
        .iter()
        .map(|(w, uv)| (project(&pose.inverse().transform_point(w), &k).unwrap() - uv).norm())
        .sum::<f64>()
        / inliers.len() as f64;
    assert!(mean < s.ransac.pixel_threshold);
}

#[test]
fn window_restores_perturbed_points() {
    let scene = short_scene(6);
    let states = oracle_states(&scene, 16, false);
    let k = scene.settings.intrinsics;
    let s = settings();
    let mut wp = build_window_problem(&states, 4, &k, &s).unwrap();
    let truth: Vec<Vector3<f64>> = wp.points.iter().map(|&(_, _, v)| wp.problem.point(v)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let normal = rand_distr::Normal::new(0.0, 0.05).unwrap();
    for &(_, _, v) in &wp.points {
        let p = wp.problem.point(v) + Vector3::from_fn(|_, _| rng.sample(normal));
        wp.problem.set_point(v, p);
    }
    let before = wp.problem.cost().unwrap();
    let report = lm_minimize(&mut wp.problem, &schur_config(&s)).unwrap();
    assert!(report.is_monotone());
    assert!(report.final_cost <= before);
    for (&(_, _, v), t) in wp.points.iter().zip(&truth) {
        assert!((wp.problem.point(v) - t).norm() < 1e-5);
    }
}

#[test]
fn window_of_one_is_motion_only() {
    let scene = short_scene(3);
    let mut states = oracle_states(&scene, 16, false);
    let k = scene.settings.intrinsics;
    let s = settings();
    let truth = states[2].camera_pose;
    states[2].camera_pose = se3_exp(&Twist::new(Vector3::new(0.0, 0.01, 0.0), Vector3::new(0.02, 0.0, 0.0))).compose(&truth);
    let copy = states.clone();
    local_batch_optimize(&mut states, 1, &k, &s).unwrap().unwrap();
    let prev = copy[1].camera_pose;
    let pairs: Vec<_> = copy[2].static_steps.iter().map(|st| (step_point(&prev, st, &k), st.uv)).collect();
    let (expected, _) = motion_only_ba(&copy[2].camera_pose, &pairs, &k, &s).unwrap();
    assert_eq!(states[2].camera_pose, expected);
    assert_eq!(states[1].camera_pose, copy[1].camera_pose);
}

#[test]
fn window_keeps_gauge_and_cost_decreases() {
    let scene = short_scene(5);
    let mut states = oracle_states(&scene, 16, false);
    let k = scene.settings.intrinsics;
    let s = settings();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for st in states.iter_mut().skip(1) {
        st.camera_pose = se3_exp(&random_twist(&mut rng, 0.003, 0.01)).compose(&st.camera_pose);
    }
    let oldest = states[1].camera_pose;
    let report = local_batch_optimize(&mut states, 4, &k, &s).unwrap().unwrap();
    assert!(report.is_monotone());
    assert!(report.final_cost < report.initial_cost);
    assert_eq!(states[1].camera_pose, oldest);
}

#[test]
fn static_only_graph_has_no_motions() {
    let scene = short_scene(4);
    let states = oracle_states(&scene, 16, false);
    let g = build_global_graph(&states, &scene.settings.intrinsics, &settings()).unwrap();
    assert_eq!(g.num_motions(), 0);
    g.check_connected().unwrap();
    let steps: usize = states.iter().map(|s| s.static_steps.len()).sum();
    assert_eq!(g.num_factors(), 2 * steps);
    assert_eq!(g.num_vertices(), states.len() + steps);
}

/// Pairs (k-1, k) in which a moving object covers at least `min` sampled pixels in frame k-1.
fn visible_pairs(scene: &SyntheticScene, stride: usize) -> usize {
    let (w, h) = (scene.spec.width, scene.spec.height);
    let mut n = 0;
    for f in 1..scene.frames.len() {
        for (i, o) in scene.spec.objects.iter().enumerate() {
            if scene.object_motion(o.label, f).unwrap().translation.norm() < 1e-9 {
                continue;
            }
            let mut count = 0;
            for y in (0..h).step_by(stride) {
                for x in (0..w).step_by(stride) {
                    let d = scene.exact[f - 1].depth[y * w + x];
                    if scene.exact[f - 1].owner[y * w + x] == Owner::Object(i) && d > 0.0 && d <= 25.0 {
                        count += 1;
                    }
                }
            }
            if count >= 6 {
                n += 1;
            }
        }
    }
    n
}

#[test]
fn global_graph_bookkeeping() {
    let scene = short_scene(12);
    let mut s = settings();
    let states = oracle_states(&scene, 8, true);
    let g = build_global_graph(&states, &scene.settings.intrinsics, &s).unwrap();
    assert!(g.num_motions() > 0);
    // steps that leave the image make this an upper bound
    assert!(g.num_motions() <= visible_pairs(&scene, 8));
    assert!(g.num_motions() + 2 >= visible_pairs(&scene, 8));
    let statics: usize = states.iter().map(|s| s.static_steps.len()).sum();
    let dynamics: usize = states.iter().flat_map(|s| s.objects.values()).map(|o| o.steps.len()).sum();
    assert_eq!(g.num_factors(), 2 * statics + 4 * dynamics);
    assert_eq!(g.count_factors(FactorKind::PointMotion), dynamics);

    s.smoothness_weight = 1.0;
    let g2 = build_global_graph(&states, &scene.settings.intrinsics, &s).unwrap();
    let mut pairs = 0;
    for st in states.iter().skip(1) {
        for l in st.objects.keys() {
            if st.index >= 1 && states[st.index - 1].objects.contains_key(l) {
                pairs += 1;
            }
        }
    }
    assert_eq!(g2.num_factors(), g.num_factors() + pairs);
    assert_eq!(g2.count_factors(FactorKind::MotionSmoothness), pairs);
    assert!(g2.to_text().lines().count() == g2.num_vertices() + g2.num_factors());
}

#[test]
fn global_at_truth_is_optimal() {
    let scene = short_scene(8);
    let s = settings();
    let states = oracle_states(&scene, 10, true);
    let mut g = build_global_graph(&states, &scene.settings.intrinsics, &s).unwrap();
    let before = g.camera_poses();
    let motions = g.motions();
    let report = global_batch_optimize(&mut g, &s).unwrap();
    assert!(report.initial_cost < 1e-18, "{}", report.initial_cost);
    for (f, p) in g.camera_poses() {
        assert!((p.translation - before[&f].translation).norm() < 1e-8);
    }
    for (key, m) in g.motions() {
        assert!((m.translation - motions[&key].translation).norm() < 1e-8);
    }
}

#[test]
fn global_reduces_injected_noise() {
    let scene = short_scene(10);
    let s = settings();
    let mut states = oracle_states(&scene, 10, true);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tn = rand_distr::Normal::new(0.0, 0.01).unwrap();
    let rn = rand_distr::Normal::new(0.0, 0.005).unwrap();
    for st in states.iter_mut().skip(1) {
        let xi = Twist::new(Vector3::from_fn(|_, _| rng.sample(rn)), Vector3::from_fn(|_, _| rng.sample(tn)));
        st.camera_pose = se3_exp(&xi).compose(&st.camera_pose);
    }
    let rmse = |poses: &BTreeMap<usize, Pose>| {
        (poses.iter().map(|(f, p)| (p.translation - scene.camera_poses[*f].translation).norm_squared()).sum::<f64>()
            / poses.len() as f64)
            .sqrt()
    };
    let mut g = build_global_graph(&states, &scene.settings.intrinsics, &s).unwrap();
    let anchor = g.camera_poses()[&0];
    let before = rmse(&g.camera_poses());
    let eq2_before = g.point_motion_residual_mean();
    let report = global_batch_optimize(&mut g, &s).unwrap();
    assert!(report.is_monotone());
    assert!(rmse(&g.camera_poses()) < before);
    assert!(g.point_motion_residual_mean() < eq2_before);
    assert_eq!(g.camera_poses()[&0], anchor);
    apply_global(&g, &mut states, 10.0);
    assert_eq!(states[3].camera_pose, g.camera_poses()[&3]);
}

#[test]
fn missing_anchor_is_rejected() {
    let scene = short_scene(3);
    let states = oracle_states(&scene, 16, false);
    let mut g = build_global_graph(&states, &scene.settings.intrinsics, &settings()).unwrap();
    g.remove_anchor();
    assert!(matches!(global_batch_optimize(&mut g, &settings()), Err(BackendError::DisconnectedGraph { .. })));
}

#[test]
fn isolated_camera_is_disconnected() {
    let scene = short_scene(3);
    let mut states = oracle_states(&scene, 16, false);
    states[2].static_steps.clear();
    let g = build_global_graph(&states, &scene.settings.intrinsics, &settings()).unwrap();
    assert_eq!(g.check_connected(), Err(BackendError::DisconnectedGraph { unreached: 1, total: g.num_vertices() }));
}
