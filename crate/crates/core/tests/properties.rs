use hiloc::config::KeyValues;
use hiloc::estimation::stereo_depth;
use hiloc::eval::{ate, rpe, Trajectory};
use hiloc::features::{Channel, Keypoint};
use hiloc::geometry::{backproject, project, se3_exp, se3_log, CameraIntrinsics, Pose, Twist};
use hiloc::matching::{projection_match_keypoints, MatchParams};
use hiloc::synth::{drift_descriptor, random_unit, read_keypoints, write_keypoints};
use hiloc::worldmap::{MapPoint, VisualMap};
use hiloc::{fmt_f64, Descriptor};
use nalgebra::{DVector, Vector2, Vector3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn twist(max_t: f64, max_r: f64) -> impl Strategy<Value = Twist> {
    (
        prop::array::uniform3(-max_t..max_t),
        prop::array::uniform3(-max_r..max_r),
    )
        .prop_map(|(t, r)| Twist::new(t[0], t[1], t[2], r[0], r[1], r[2]))
}

fn pose() -> impl Strategy<Value = Pose> {
    twist(10.0, 3.0).prop_map(|xi| se3_exp(&xi).unwrap())
}

fn cam() -> CameraIntrinsics {
    CameraIntrinsics::new(400.0, 410.0, 320.0, 240.0, 640, 480).unwrap()
}

fn close(a: &Pose, b: &Pose, tol: f64) -> bool {
    let (dt, dr) = a.distance_to(b);
    dt < tol && dr < tol
}

fn trajectory(poses: &[Pose]) -> Trajectory {
    Trajectory::new(poses.iter().enumerate().map(|(i, p)| (i as f64 * 0.1, *p)).collect()).unwrap()
}

proptest! {
    #[test]
    fn exp_log_round_trip(xi in twist(5.0, 1.8)) {
        let back = se3_log(&se3_exp(&xi).unwrap()).unwrap();
        prop_assert!((back.as_vector() - xi.as_vector()).norm() < 1e-9);
    }

    #[test]
    fn inverse_composes_to_identity(p in pose()) {
        prop_assert!(close(&p.compose(&p.inverse()), &Pose::identity(), 1e-12));
        prop_assert!(close(&p.inverse().inverse(), &p, 1e-12));
    }

    #[test]
    fn backproject_inverts_project(u in 0.0..640.0f64, v in 0.0..480.0f64, z in 0.2..80.0f64) {
        let k = cam();
        let pc = backproject(&k, &Vector2::new(u, v), z);
        let uv = project(&Pose::identity(), &k, &pc).unwrap();
        prop_assert!((uv - Vector2::new(u, v)).norm() < 1e-9);
        prop_assert!((pc.z - z).abs() < 1e-12);
    }

    #[test]
    fn stereo_depth_round_trip(z in 0.3..100.0f64, ul in 0.0..640.0f64, b in 0.05..0.5f64) {
        let fx = 400.0;
        prop_assume!(fx * b / z >= hiloc::estimation::DISPARITY_MIN);
        let depth = stereo_depth(fx, b, ul, ul - fx * b / z).unwrap();
        prop_assert!((depth - z).abs() < 1e-9 * z.max(1.0));
    }

    #[test]
    fn fmt_f64_is_exact(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        prop_assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
    }

    #[test]
    fn ate_and_rpe_ignore_rigid_motion(seed in any::<u64>(), g in pose()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let poses: Vec<Pose> = (0..12)
            .map(|_| se3_exp(&Twist::from_parts(
                Vector3::from_fn(|_, _| rand::Rng::random_range(&mut rng, -5.0..5.0)),
                Vector3::from_fn(|_, _| rand::Rng::random_range(&mut rng, -1.0..1.0)),
            )).unwrap())
            .collect();
        let gt = trajectory(&poses);
        let est = trajectory(&poses.iter().map(|p| p.compose(&se3_exp(&Twist::new(0.01, -0.02, 0.0, 0.0, 0.01, 0.0)).unwrap())).collect::<Vec<_>>());
        prop_assert!(ate(&gt, &gt).unwrap().rmse < 1e-9);
        prop_assert!(rpe(&gt, &gt, 1).unwrap().rmse < 1e-9);
        let a = ate(&est, &gt).unwrap().rmse;
        prop_assert!((ate(&est.transformed(&g), &gt).unwrap().rmse - a).abs() < 1e-9);
        let r = rpe(&est, &gt, 2).unwrap().rmse;
        prop_assert!((rpe(&est.transformed(&g), &gt.transformed(&g.inverse()), 2).unwrap().rmse - r).abs() < 1e-9);
    }

    #[test]
    fn key_values_round_trip(entries in prop::collection::btree_map("[a-z_][a-z0-9_]{0,8}", "[ -~&&[^=#]]{0,12}", 0..8)) {
        let mut kv = KeyValues::new();
        for (k, v) in &entries {
            kv.set(k, v.trim());
        }
        let mut buf = Vec::new();
        kv.write_to(&mut buf).unwrap();
        prop_assert_eq!(KeyValues::read_from(&buf[..]).unwrap(), kv);
    }

    #[test]
    fn drift_keeps_unit_norm_and_angle(seed in any::<u64>(), drift in 0.0..1.0f64, dim in 2usize..64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = random_unit(&mut rng, dim);
        let e = drift_descriptor(&d, drift, &mut rng);
        prop_assert!((e.norm() - 1.0).abs() < 1e-12);
        let angle = d.dot(&e).clamp(-1.0, 1.0).acos();
        prop_assert!((angle - drift * std::f64::consts::FRAC_PI_2).abs() < 1e-6);
    }

    #[test]
    fn keypoint_files_round_trip(seed in any::<u64>(), n in 0usize..20, with_right in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kps: Vec<Keypoint> = (0..n)
            .map(|i| Keypoint {
                pixel: Vector2::new(i as f64 * 31.7 + 0.123456789, 479.0 - i as f64 * 0.1),
                score: 1.0,
                descriptor: random_unit(&mut rng, 6),
                channel: Channel::Handcrafted,
            })
            .collect();
        let right: Vec<Option<f64>> = (0..n).map(|i| (i % 3 != 0).then_some(i as f64 * 2.5 + 0.1)).collect();
        let mut buf = Vec::new();
        write_keypoints(&mut buf, &kps, with_right.then_some(&right[..])).unwrap();
        let (back, back_right) = read_keypoints(&buf[..], 6, Channel::Handcrafted).unwrap();
        prop_assert_eq!(back.len(), n);
        for (a, b) in back.iter().zip(&kps) {
            prop_assert_eq!(a.pixel, b.pixel);
            prop_assert!((&a.descriptor - &b.descriptor).amax() < 1e-6);
        }
        if with_right {
            prop_assert_eq!(back_right, right);
        } else {
            prop_assert!(back_right.iter().all(Option::is_none));
        }
    }

    #[test]
    fn matches_are_one_to_one_and_sorted(seed in any::<u64>(), radius in 2.0..30.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = cam();
        let mut map = VisualMap::new(Channel::Learned, 3);
        let mut kps = Vec::new();
        for id in 0..40u64 {
            let x = Vector3::new(
                rand::Rng::random_range(&mut rng, -5.0..5.0),
                rand::Rng::random_range(&mut rng, -4.0..4.0),
                rand::Rng::random_range(&mut rng, 3.0..15.0),
            );
            let d: Descriptor = random_unit(&mut rng, 3);
            if let Ok(uv) = project(&Pose::identity(), &k, &x) {
                kps.push(Keypoint {
                    pixel: uv + Vector2::new(rand::Rng::random_range(&mut rng, -8.0..8.0), 1.0),
                    score: 1.0,
                    descriptor: &d + DVector::from_element(3, 0.05),
                    channel: Channel::Learned,
                });
            }
            map.points.insert(id, MapPoint {
                id,
                position: x,
                descriptor: d,
                mean_view_dir: x.normalize(),
                observations: Vec::new(),
                channel: Channel::Learned,
            });
        }
        let params = MatchParams { window_radius: radius, ..MatchParams::learned() };
        let m = projection_match_keypoints(&kps, &k, &map, &Pose::identity(), &params).unwrap();
        let mut used = std::collections::BTreeSet::new();
        for w in m.pairs.windows(2) {
            prop_assert!(w[0].point_id < w[1].point_id);
        }
        for p in &m.pairs {
            prop_assert!(used.insert(p.keypoint_index));
            prop_assert!(p.residual.norm() <= radius + 1e-9);
            prop_assert!(p.distance <= params.max_distance);
        }
    }
}
