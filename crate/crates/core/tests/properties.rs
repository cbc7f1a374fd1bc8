use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use viokit::global::{enu_to_lla, fit_rigid, lla_to_enu, Geodetic};
use viokit::io::num;
use viokit::preint::{preint_batch, preint_reset, ImuSample, NoiseParams};
use viokit::quat::{boxplus, quat_mul, so3_exp, so3_log};
use viokit::sim::SimConfig;
use viokit::solver::schur_reduce;
use viokit::{Pose, UnitQuat, Vec3};

fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn rotation() -> impl Strategy<Value = UnitQuat> {
    vec3(3.0).prop_map(|v| so3_exp(&v))
}

fn pose() -> impl Strategy<Value = Pose> {
    (rotation(), vec3(50.0)).prop_map(|(rotation, translation)| Pose { rotation, translation })
}

/// Piecewise-constant random IMU stream at 200 Hz.
fn imu_stream() -> impl Strategy<Value = Vec<ImuSample>> {
    prop::collection::vec((vec3(2.0), vec3(12.0)), 2..60).prop_map(|readings| {
        readings.into_iter().enumerate().map(|(k, (g, a))| ImuSample::new(k as f64 * 0.005, g, a)).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn exp_log_round_trip(v in vec3(1.8)) {
        prop_assert!((so3_log(&so3_exp(&v)) - v).norm() < 1e-9);
    }

    #[test]
    fn right_update_is_local(q in rotation(), d in vec3(0.25)) {
        // small steps use the first-order quaternion, exact up to a cubic term
        let r = boxplus(&q, &d);
        prop_assert!((so3_log(&quat_mul(&q.inverse(), &r)) - d).norm() <= d.norm().powi(3) / 10.0 + 1e-12);
    }

    #[test]
    fn covariance_symmetric_psd(samples in imu_stream()) {
        let d = preint_batch(&samples, Vec3::zeros(), Vec3::zeros(), &NoiseParams::default()).unwrap();
        let scale = d.cov.amax().max(1e-300);
        prop_assert!((d.cov - d.cov.transpose()).amax() <= 1e-12 * scale);
        prop_assert!(d.cov.symmetric_eigen().eigenvalues.min() >= -1e-10 * scale);
        prop_assert!((d.gamma.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_equals_incremental(samples in imu_stream(), split in 1usize..59) {
        let noise = NoiseParams::default();
        let batch = preint_batch(&samples, Vec3::zeros(), Vec3::zeros(), &noise).unwrap();
        let mut inc = preint_reset(Vec3::zeros(), Vec3::zeros());
        let split = split.min(samples.len() - 1);
        for w in samples[..=split].windows(2).chain(samples[split..].windows(2)) {
            inc.push(&w[0], &w[1], &noise).unwrap();
        }
        prop_assert_eq!(inc.alpha, batch.alpha);
        prop_assert_eq!(inc.gamma, batch.gamma);
        prop_assert_eq!(inc.cov, batch.cov);
    }

    #[test]
    fn zero_bias_change_is_identity(samples in imu_stream(), ba in vec3(0.1), bg in vec3(0.01)) {
        let d = preint_batch(&samples, ba, bg, &NoiseParams::default()).unwrap();
        let (a, b, g) = d.correct_for_bias(&ba, &bg);
        prop_assert_eq!((a, b), (d.alpha, d.beta));
        prop_assert!(so3_log(&quat_mul(&g.inverse(), &d.gamma)).norm() < 1e-15);
    }

    #[test]
    fn schur_reduction_matches_full_solve(seed in any::<u64>(), n in 2usize..30, m in 1usize..29) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let m = m.min(n - 1);
        let a = DMatrix::from_fn(n + 3, n, |_, _| rng.random_range(-1.0..1.0));
        let h = a.transpose() * &a + DMatrix::identity(n, n) * 0.05;
        let b = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let marg: Vec<usize> = (0..m).collect();
        let kept: Vec<usize> = (m..n).collect();
        let full = h.clone().cholesky().unwrap().solve(&b);
        let (hp, bp) = schur_reduce(&h, &b, &marg, &kept);
        let reduced = hp.cholesky().unwrap().solve(&bp);
        for (i, &k) in kept.iter().enumerate() {
            prop_assert!((reduced[i] - full[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn rigid_fit_recovers_any_transform(t in pose(), src in prop::collection::vec(pose(), 3..12)) {
        let dst: Vec<Pose> = src.iter().map(|p| t.compose(p)).collect();
        let fit = fit_rigid(&src, &dst);
        prop_assert!(so3_log(&quat_mul(&t.rotation.inverse(), &fit.rotation)).norm() < 1e-9);
        prop_assert!((fit.translation - t.translation).norm() < 1e-8);
    }

    #[test]
    fn geodetic_round_trip(lat in -80.0..80.0f64, lon in -179.0..179.0f64, alt in -100.0..3000.0f64, enu in vec3(5000.0)) {
        let origin = Geodetic { lat, lon, alt };
        let back = lla_to_enu(&enu_to_lla(&enu, &origin), &origin);
        prop_assert!((back - enu).norm() < 1e-6);
        prop_assert!(lla_to_enu(&origin, &origin).norm() < 1e-9);
    }

    #[test]
    fn csv_numbers_round_trip(x in any::<f64>().prop_filter("finite", |x| x.is_finite())) {
        let text = num(x);
        prop_assert_eq!(text.parse::<f64>().unwrap(), x);
        prop_assert!(!text.contains(','));
    }

    #[test]
    fn sim_config_json_round_trip(seed in any::<u64>(), rate in 50.0..400.0f64, landmarks in 10usize..400) {
        let cfg = SimConfig { seed, imu_rate: rate, landmarks, ..Default::default() };
        let text = serde_json::to_string(&cfg).unwrap();
        let back: SimConfig = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
