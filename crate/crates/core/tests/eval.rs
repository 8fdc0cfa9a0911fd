use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vntpose_core::eval::{consistency, histogram, mean_pose, stability, StabilityGroup, BINS, BIN_DEGREES};
use vntpose_core::geometry::{angular_distance, sample_uniform_rotation};
use vntpose_core::Mat3;

/// Rotation about a random axis by `deg` degrees (Rodrigues).
fn axis_angle(axis: [f64; 3], deg: f64) -> Mat3 {
    let n = (axis.iter().map(|a| a * a).sum::<f64>()).sqrt();
    let [x, y, z] = axis.map(|a| a / n);
    let (s, c) = deg.to_radians().sin_cos();
    let k = Mat3([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]]);
    Mat3::IDENTITY + k.scale(s) + (k * k).scale(1.0 - c)
}

#[test]
fn two_pose_mean_matches_dense_search() {
    let poses = [Mat3::IDENTITY, Mat3::rot_z(12f64.to_radians())];
    let rep = consistency(&poses).unwrap();
    // The projected mean minimizes Σ‖R_i − M‖²; search rotations about z
    // on a fine grid for the minimizer.
    let cost = |m: &Mat3| poses.iter().map(|p| (*p - *m).frobenius().powi(2)).sum::<f64>();
    let best = (0..=12_000)
        .map(|i| i as f64 * 1e-3)
        .min_by(|a, b| cost(&Mat3::rot_z(a.to_radians())).total_cmp(&cost(&Mat3::rot_z(b.to_radians()))))
        .unwrap();
    assert!((best - 6.0).abs() < 1e-3);
    assert!(angular_distance(&rep.mean, &Mat3::rot_z(best.to_radians())).unwrap() < 2e-3);
    assert!((rep.std_degrees - 6.0).abs() < 1e-9);
    assert!(rep.deviations.iter().all(|d| (d - 6.0).abs() < 1e-9));
    assert_eq!(rep.histogram[1], 1.0);
}

#[test]
fn spread_is_invariant_to_a_global_right_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let base = sample_uniform_rotation(&mut rng);
        let poses: Vec<Mat3> = (0..20)
            .map(|_| axis_angle([0; 3].map(|_| rng.random_range(-1.0..1.0)), rng.random_range(0.0..40.0)) * base)
            .collect();
        let q = sample_uniform_rotation(&mut rng);
        let a = consistency(&poses).unwrap();
        let b = consistency(&poses.iter().map(|p| *p * q).collect::<Vec<_>>()).unwrap();
        assert!((a.std_degrees - b.std_degrees).abs() < 1e-8);
        let c = consistency(&poses.iter().map(|p| q * *p).collect::<Vec<_>>()).unwrap();
        assert!((a.std_degrees - c.std_degrees).abs() < 1e-8);
    }
}

#[test]
fn known_spread() {
    // Rotations by ±θ about one axis average to the identity.
    let theta: f64 = 32.0;
    let poses = [Mat3::rot_x(theta.to_radians()), Mat3::rot_x(-theta.to_radians())];
    let rep = consistency(&poses).unwrap();
    assert!((rep.std_degrees - theta).abs() < 1e-9);
    assert!((rep.mean - Mat3::IDENTITY).max_abs() < 1e-12);
    assert!(mean_pose(&[]).is_err());
    let rows = rep.histogram_rows();
    assert_eq!(rows.len(), BINS);
    assert_eq!(rows[0].0, BIN_DEGREES / 2.0);
    assert_eq!(rows[6].1, 1.0);
}

#[test]
fn histogram_bins() {
    let h = histogram(&[]);
    assert!(h.iter().all(|m| *m == 0.0));
    let h = histogram(&[2.5, 7.5, 7.5, 12.5]);
    assert_eq!(&h[..3], &[0.25, 0.5, 0.25]);
}

#[test]
fn stability_of_perturbed_estimates() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let k = 10;
    let mut groups = Vec::new();
    for _ in 0..5 {
        let base = sample_uniform_rotation(&mut rng);
        let applied: Vec<Mat3> = (0..k).map(|_| sample_uniform_rotation(&mut rng)).collect();
        groups.push(StabilityGroup {
            estimates: applied.iter().map(|q| base * *q).collect(),
            applied,
        });
    }
    assert!(stability(&groups, true).unwrap() < 1e-6);

    // Two copies ±θ apart about the same axis: each deviates θ from the
    // mean, so the per-instance term is √(2θ²).
    let theta: f64 = 3.0;
    let g = StabilityGroup {
        estimates: vec![Mat3::rot_y(theta.to_radians()), Mat3::rot_y(-theta.to_radians())],
        applied: vec![Mat3::IDENTITY; 2],
    };
    let s = stability(&[g.clone(), g], false).unwrap();
    assert!((s - (2.0 * theta * theta).sqrt()).abs() < 1e-9);

    assert!(stability(&[], true).is_err());
    let single = StabilityGroup {
        estimates: vec![Mat3::IDENTITY],
        applied: vec![Mat3::IDENTITY],
    };
    assert!(stability(&[single], true).is_err());
}
