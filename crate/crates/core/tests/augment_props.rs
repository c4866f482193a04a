use nalgebra::Vector3;
use posealign_core::augment::{
    apply_augmentation, discriminate, sample_noise, AnchorDiscriminatorNet, AugBounds, DiscriminatorConfig,
    GeneratorConfig, GeneratorNet,
};
use posealign_core::data::{sample_pose, PoseFamily};
use posealign_core::skeleton::{apply_rotation, Pose3D, SkeletonDef};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn pose(seed: u64) -> Pose3D {
    sample_pose(&mut ChaCha8Rng::seed_from_u64(seed), &PoseFamily::source_default())
}

fn randomized(values: &mut [f64], rng: &mut ChaCha8Rng, scale: f64) {
    for v in values {
        *v = scale * rng.sample::<f64, _>(StandardNormal);
    }
}

fn lengths(p: &Pose3D, skel: &SkeletonDef) -> Vec<f64> {
    skel.bones().iter().map(|b| (p.joints[b.child] - p.joints[b.parent]).norm()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn augmented_poses_stay_valid(s in any::<u64>(), w in any::<u64>(), scale in 0.01..2.0f64) {
        let skel = SkeletonDef::h36m16();
        let bounds = AugBounds { ba_max: 0.3, bl_max: 0.2, rot_max: std::f64::consts::PI };
        let cfg = GeneratorConfig { hidden_dim: 16, noise_dim: 4, bounds, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(w);
        let mut gen = GeneratorNet::new(cfg, &skel, &mut rng).unwrap();
        randomized(gen.store.values_mut(), &mut rng, scale);
        let src = pose(s);
        let params = gen.generate_aug_params(&src, &sample_noise(&mut rng, 4), &skel).unwrap();
        prop_assert!(params.satisfies(&bounds));
        let out = apply_augmentation(&src, &params, &skel).unwrap();
        prop_assert!(out.is_finite());
        prop_assert!(out.joints[skel.root_index()].norm() < 1e-9);
        for (a, b) in lengths(&src, &skel).iter().zip(lengths(&out, &skel)) {
            prop_assert!(b >= a * (1.0 - bounds.bl_max) - 1e-9 && b <= a * (1.0 + bounds.bl_max) + 1e-9);
        }
    }

    #[test]
    fn critic_ignores_rotation(s in any::<u64>(), w in any::<u64>(), r in (-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64)) {
        let skel = SkeletonDef::h36m16();
        let mut rng = ChaCha8Rng::seed_from_u64(w);
        let mut d = AnchorDiscriminatorNet::new(DiscriminatorConfig { hidden_dim: 16, ..Default::default() }, &skel, &mut rng, None).unwrap();
        randomized(d.store.values_mut(), &mut rng, 0.5);
        let p = pose(s);
        let q = apply_rotation(&p, &Vector3::new(r.0, r.1, r.2));
        let (a, b) = (discriminate(&d, &p, &skel).unwrap(), discriminate(&d, &q, &skel).unwrap());
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }
}
