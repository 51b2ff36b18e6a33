use dynakey_core::classifier::{bayes_update, geometric_moving_probability, FusedObservation};
use dynakey_core::dataset::{associate, format_trajectory, parse_trajectory_str, StampedPose};
use dynakey_core::eval::{ate_rmse, rpe};
use dynakey_core::geometry::{
    estimate_fundamental_ransac, fundamental_from_poses, project, reprojection_error, RansacParams,
};
use dynakey_core::mask::{build_distance_field, semantic_moving_probability, MaskImage};
use dynakey_core::oim::{apply_oim, find_supporting_dynamics, weighted_centroid, InteractionZone, OimParams, OimPoint};
use dynakey_core::sim::{generate_scene, SceneConfig};
use dynakey_core::{CameraIntrinsics, FusionRule, MovingBelief, PoseSE3};
use nalgebra::{UnitQuaternion, Vector2, Vector3};
use proptest::prelude::*;
use std::path::Path;

fn obs(p: f64) -> FusedObservation {
    FusedObservation { p_move: Some(p), rule: FusionRule::SemanticOnly }
}

fn arb_pose() -> impl Strategy<Value = PoseSE3> {
    (prop::array::uniform3(-3.0..3.0f64), prop::array::uniform3(-1.0..1.0f64), -3.0..3.0f64).prop_map(|(t, axis, angle)| {
        let axis = Vector3::from(axis);
        let rot = if axis.norm() < 1e-3 {
            UnitQuaternion::identity()
        } else {
            UnitQuaternion::from_scaled_axis(axis.normalize() * angle)
        };
        PoseSE3::new(rot, Vector3::from(t))
    })
}

fn arb_mask(max: usize) -> impl Strategy<Value = MaskImage> {
    (1..=max, 1..=max).prop_flat_map(|(w, h)| {
        prop::collection::vec(prop::sample::select(vec![0u8, 0, 1, 1, 2]), w * h)
            .prop_map(move |ids| MaskImage::new(w, h, ids).unwrap())
    })
}

fn brute_signed(m: &MaskImage) -> Vec<f64> {
    let (w, h) = (m.width(), m.height());
    let inside = |x: usize, y: usize| m.ids()[y * w + x] != 0;
    let mut edges = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let open = (x > 0 && !inside(x - 1, y))
                || (x + 1 < w && !inside(x + 1, y))
                || (y > 0 && !inside(x, y - 1))
                || (y + 1 < h && !inside(x, y + 1));
            if inside(x, y) && open {
                edges.push((x as f64, y as f64));
            }
        }
    }
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let d = edges.iter().map(|(ex, ey)| (ex - x as f64).hypot(ey - y as f64)).fold(f64::INFINITY, f64::min);
            out.push(if inside(x, y) { d } else { -d });
        }
    }
    out
}

fn arb_points(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<OimPoint>> {
    prop::collection::vec(
        (0.0..120.0f64, 0.0..120.0f64, prop::option::weighted(0.9, 0.3..6.0f64)),
        n,
    )
    .prop_map(|v| v.into_iter().map(|(x, y, z)| OimPoint { pixel: Vector2::new(x, y), depth: z }).collect())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn bayes_update_is_monotone(a in 0.0..1.0f64, b in 0.0..1.0f64, p in 0.0..1.0f64, q in 0.0..1.0f64, eps in 0.0..0.5f64) {
        let (lo, hi) = (a.min(b), a.max(b));
        let by_prior = |prior| bayes_update(MovingBelief::new(prior), &obs(p), eps).value();
        prop_assert!(by_prior(lo) <= by_prior(hi) + 1e-15);
        let (plo, phi) = (p.min(q), p.max(q));
        let by_obs = |pm| bayes_update(MovingBelief::new(a), &obs(pm), eps).value();
        prop_assert!(by_obs(plo) <= by_obs(phi) + 1e-15);
        prop_assert!((0.0..=1.0).contains(&by_obs(p)));
    }

    #[test]
    fn semantic_probability_is_symmetric(d in -200.0..200.0f64, z in 0.0..15.0f64) {
        let a = semantic_moving_probability(d, z).unwrap().value;
        let b = semantic_moving_probability(-d, z).unwrap().value;
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn semantic_probability_increases_with_distance(d in -100.0..100.0f64, step in 0.0..10.0f64, z in 0.0..15.0f64) {
        let a = semantic_moving_probability(d, z).unwrap().value;
        let b = semantic_moving_probability(d + step, z).unwrap().value;
        prop_assert!(a <= b);
    }

    #[test]
    fn geometric_probability_is_bounded_and_monotone(e in 0.0..5.0f64, step in 0.0..1.0f64, z in 0.0..15.0f64, sigma in 0.1..3.0f64) {
        let a = geometric_moving_probability(e, z, sigma).unwrap();
        let b = geometric_moving_probability(e + step, z, sigma).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(a <= b);
    }

    #[test]
    fn distance_field_matches_brute_force(m in arb_mask(24)) {
        let field = build_distance_field(&m);
        let want = brute_signed(&m);
        prop_assert_eq!(field.values(), want.as_slice());
    }

    #[test]
    fn distance_field_is_one_lipschitz(m in arb_mask(32)) {
        let f = build_distance_field(&m);
        let (w, h) = (m.width(), m.height());
        for y in 0..h {
            for x in 0..w {
                let here = f.at(x, y);
                if !here.is_finite() {
                    continue;
                }
                if x + 1 < w {
                    prop_assert!((here - f.at(x + 1, y)).abs() <= 1.0 + 1e-12);
                }
                if y + 1 < h {
                    prop_assert!((here - f.at(x, y + 1)).abs() <= 1.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn neighbour_search_matches_filter(q in arb_points(1..2), dynamics in arb_points(0..40)) {
        let params = OimParams::default();
        let query = OimPoint { depth: Some(q[0].depth.unwrap_or(2.0)), ..q[0] };
        let got = find_supporting_dynamics(&query, &dynamics, &params).unwrap();
        let z = query.depth.unwrap();
        let radius = params.delta.eval(z).unwrap();
        let mut want: Vec<(f64, usize)> = dynamics
            .iter()
            .enumerate()
            .filter_map(|(i, d)| {
                let dist = (d.pixel - query.pixel).norm();
                let dz = d.depth?;
                (dist < radius && (dz - z).abs() < params.rho).then_some((dist, i))
            })
            .collect();
        want.sort_by(|a, b| a.0.total_cmp(&b.0));
        prop_assert_eq!(got.iter().map(|n| n.index).collect::<Vec<_>>(), want.iter().map(|w| w.1).collect::<Vec<_>>());
        if !got.is_empty() {
            let g = weighted_centroid(&got, params.rho).unwrap();
            let (min_x, max_x) = got.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), n| (a.min(n.pixel.x), b.max(n.pixel.x)));
            let (min_y, max_y) = got.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), n| (a.min(n.pixel.y), b.max(n.pixel.y)));
            prop_assert!(g.x >= min_x - 1e-9 && g.x <= max_x + 1e-9 && g.y >= min_y - 1e-9 && g.y <= max_y + 1e-9);
        }
    }

    #[test]
    fn ate_is_invariant_to_rigid_motion(g in arb_pose(), seed in 0u64..1000) {
        let gt: Vec<StampedPose> = (0..15)
            .map(|i| {
                let t = i as f64 * 0.3 + seed as f64 * 1e-3;
                StampedPose {
                    timestamp: i as f64,
                    pose: PoseSE3::new(UnitQuaternion::from_euler_angles(0.1 * t, 0.2 * t, t), Vector3::new(t.sin(), t.cos(), 0.3 * t)),
                }
            })
            .collect();
        let moved: Vec<StampedPose> = gt.iter().map(|s| StampedPose { pose: g * s.pose, ..*s }).collect();
        prop_assert!(ate_rmse(&moved, &gt, 0.02).unwrap() < 1e-9);
        let r = rpe(&moved, &gt, 1, 0.02).unwrap();
        // the trace formula resolves angles near zero to about 1e-6 degrees
        prop_assert!(r.trans_rmse < 1e-9 && r.rot_rmse_deg < 1e-5);
    }

    #[test]
    fn association_is_symmetric(a in prop::collection::vec(0.0..10.0f64, 0..30), b in prop::collection::vec(0.0..10.0f64, 0..30)) {
        let mut a = a;
        let mut b = b;
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let ab = associate(&a, &b, 0.05);
        let mut ba: Vec<(usize, usize)> = associate(&b, &a, 0.05).pairs.iter().map(|(j, i)| (*i, *j)).collect();
        ba.sort_unstable();
        prop_assert_eq!(ab.pairs, ba);
    }

    #[test]
    fn trajectory_round_trip(poses in prop::collection::vec(arb_pose(), 1..20)) {
        let traj: Vec<StampedPose> = poses.iter().enumerate().map(|(i, p)| StampedPose { timestamp: 100.0 + i as f64 * 0.033, pose: *p }).collect();
        let back = parse_trajectory_str(&format_trajectory(&traj), Path::new("mem")).unwrap();
        prop_assert_eq!(back.len(), traj.len());
        for (a, b) in traj.iter().zip(&back) {
            prop_assert!((a.timestamp - b.timestamp).abs() < 1e-6);
            prop_assert!((a.pose.translation - b.pose.translation).amax() < 1e-6);
            prop_assert!(a.pose.rotation.angle_to(&b.pose.rotation) < 1e-6);
        }
    }
}

fn two_view(seed: u64, n: usize) -> (CameraIntrinsics, PoseSE3, PoseSE3, Vec<(Vector2<f64>, Vector2<f64>)>) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let k = CameraIntrinsics::tum_fr3();
    let a = PoseSE3::identity();
    let b = PoseSE3::new(
        UnitQuaternion::from_euler_angles(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)),
        Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.1..0.1), rng.random_range(0.1..0.3)),
    );
    let mut matches = Vec::new();
    while matches.len() < n {
        let w = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5), rng.random_range(2.0..8.0));
        let (Ok((q, _)), Ok((p, _))) = (project(&k, &a, &w), project(&k, &b, &w)) else { continue };
        matches.push((q, p));
    }
    (k, a, b, matches)
}

#[test]
fn ransac_recovers_planted_geometry() {
    for seed in 0..5 {
        let (k, a, b, matches) = two_view(seed, 60);
        let truth = fundamental_from_poses(&k, &a, &b).unwrap();
        let (f, inliers) = estimate_fundamental_ransac(&matches, &RansacParams { seed, ..RansacParams::default() }).unwrap();
        assert!(inliers.iter().all(|i| *i));
        for (q, p) in &matches {
            assert!(reprojection_error(&f, q, p).unwrap() < 1e-6);
            assert!(reprojection_error(&truth, q, p).unwrap() < 1e-6);
        }
    }
}

#[test]
fn ransac_flags_planted_outliers() {
    use rand::{Rng, SeedableRng};
    for seed in 0..5 {
        let (k, a, b, mut matches) = two_view(100 + seed, 100);
        let truth = fundamental_from_poses(&k, &a, &b).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut planted = vec![false; matches.len()];
        for i in 0..30 {
            // push the current point well off its epipolar line
            loop {
                let shift = Vector2::new(rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0));
                let moved = matches[i].1 + shift;
                if reprojection_error(&truth, &matches[i].0, &moved).unwrap() > 5.0 {
                    matches[i].1 = moved;
                    break;
                }
            }
            planted[i] = true;
        }
        let (_, inliers) = estimate_fundamental_ransac(&matches, &RansacParams { seed, ..RansacParams::default() }).unwrap();
        for (i, flag) in inliers.iter().enumerate() {
            assert_eq!(*flag, !planted[i], "seed {seed} match {i}");
        }
    }
}

#[test]
fn oim_never_demotes_dynamic_points() {
    let seq = generate_scene(&SceneConfig::carried_object(9)).unwrap();
    let params = dynakey_core::PipelineParams { use_oim: false, ..Default::default() };
    let results = dynakey_core::Pipeline::new(params).unwrap().run(&seq);
    for (frame, res) in seq.frames.iter().zip(&results) {
        let mut records = res.records.clone();
        let zone = dynakey_core::oim::build_interaction_zone(&frame.mask, &frame.depth, &OimParams::default()).unwrap();
        apply_oim(&mut records, &zone, &OimParams::default());
        for (before, after) in res.records.iter().zip(&records) {
            if before.state == dynakey_core::KeypointState::Dynamic {
                assert_eq!(after, before);
            }
        }
        // an empty zone never flips anything
        let mut untouched = res.records.clone();
        assert!(apply_oim(&mut untouched, &InteractionZone::empty(frame.mask.width(), frame.mask.height()), &OimParams::default()).is_empty());
    }
}

#[test]
fn scene_generation_is_deterministic() {
    let cfg = SceneConfig { frames: 6, ..SceneConfig::benchmark(42) };
    assert_eq!(generate_scene(&cfg).unwrap(), generate_scene(&cfg).unwrap());
}
