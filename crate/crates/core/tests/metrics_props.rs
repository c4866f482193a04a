use nalgebra::{Rotation3, Vector3};
use posealign_core::metrics::{auc_from_errors, auc_thresholds, mpjpe, pa_mpjpe, pck_from_errors};
use posealign_core::skeleton::Pose3D;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vec3() -> impl Strategy<Value = Vector3<f64>> {
    (-500.0..500.0f64, -500.0..500.0f64, -500.0..500.0f64).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn pose() -> impl Strategy<Value = Pose3D> {
    prop::collection::vec(vec3(), 16).prop_map(Pose3D::new)
}

fn moved(p: &Pose3D, r: &Rotation3<f64>, t: &Vector3<f64>) -> Pose3D {
    Pose3D::new(p.joints.iter().map(|j| r * j + t).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn metrics_ignore_shared_rigid_motion(p in pose(), g in pose(), axis in vec3(), t in vec3()) {
        let r = Rotation3::new(axis / 250.0);
        let (p2, g2) = (moved(&p, &r, &t), moved(&g, &r, &t));
        let (m1, m2) = (mpjpe(&p, &g).unwrap(), mpjpe(&p2, &g2).unwrap());
        prop_assert!((m1 - m2).abs() < 1e-9 * m1.max(1.0));
        let (a1, a2) = (pa_mpjpe(&p, &g).unwrap(), pa_mpjpe(&p2, &g2).unwrap());
        prop_assert!((a1 - a2).abs() < 1e-7 * a1.max(1.0));
    }

    #[test]
    fn auc_is_mean_of_grid(errors in prop::collection::vec(0.0..200.0f64, 1..200)) {
        let grid = auc_thresholds();
        let mut total = 0.0;
        for t in &grid {
            total += 100.0 * errors.iter().filter(|e| *e < t).count() as f64 / errors.len() as f64;
        }
        let auc = auc_from_errors(&errors).unwrap();
        prop_assert!((auc - total / grid.len() as f64).abs() < 1e-9);
        prop_assert!((0.0..=100.0).contains(&auc));
        let pck = pck_from_errors(&errors, 150.0).unwrap();
        prop_assert!((0.0..=100.0).contains(&pck));
    }
}

/// Random gt poses with predictions that are noisy, scaled and rotated copies.
#[test]
fn aligned_error_never_exceeds_raw_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..10_000 {
        let gt = Pose3D::new((0..16).map(|_| Vector3::from_fn(|_, _| rng.random_range(-500.0..500.0))).collect());
        let r = Rotation3::new(Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)));
        let s = rng.random_range(0.7..1.3);
        let noise = rng.random_range(0.0..200.0);
        let pred = Pose3D::new(
            gt.joints.iter().map(|j| r * j * s + Vector3::from_fn(|_, _| rng.random_range(-noise..=noise))).collect(),
        );
        let gap = pa_mpjpe(&pred, &gt).unwrap() - mpjpe(&pred, &gt).unwrap();
        worst = worst.max(gap);
    }
    assert!(worst <= 1e-9, "worst pa - mpjpe gap {worst}");
}
