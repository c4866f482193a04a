use nalgebra::Vector3;
use posealign_core::data::{sample_pose, PoseFamily};
use posealign_core::skeleton::{
    apply_bone_angle, apply_bone_length, apply_rotation, from_bones, kcs, to_bones, Pose3D, SkeletonDef,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pose(seed: u64) -> Pose3D {
    sample_pose(&mut ChaCha8Rng::seed_from_u64(seed), &PoseFamily::target_default())
}

fn vec3(r: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn lengths(p: &Pose3D, skel: &SkeletonDef) -> Vec<f64> {
    skel.bones().iter().map(|b| (p.joints[b.child] - p.joints[b.parent]).norm()).collect()
}

fn max_diff(a: &Pose3D, b: &Pose3D) -> f64 {
    a.joints.iter().zip(&b.joints).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn bones_roundtrip(s in any::<u64>()) {
        let skel = SkeletonDef::h36m16();
        let p = pose(s);
        prop_assert!(max_diff(&from_bones(&to_bones(&p, &skel).unwrap(), &skel), &p) < 1e-9);
    }

    #[test]
    fn rotation_keeps_lengths_and_kcs(s in any::<u64>(), r in vec3(4.0)) {
        let skel = SkeletonDef::h36m16();
        let p = pose(s);
        let q = apply_rotation(&p, &r);
        prop_assert!(q.joints[skel.root_index()].norm() < 1e-9);
        let (k0, k1) = (kcs(&p, &skel).unwrap(), kcs(&q, &skel).unwrap());
        let scale = k0.0.amax();
        prop_assert!((&k0.0 - &k1.0).amax() <= 1e-9 * scale.max(1.0));
        for (a, b) in lengths(&p, &skel).iter().zip(lengths(&q, &skel)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn bone_angle_keeps_lengths(s in any::<u64>(), deltas in prop::collection::vec(vec3(1.0), 15)) {
        let skel = SkeletonDef::h36m16();
        let p = pose(s);
        let q = from_bones(&apply_bone_angle(&to_bones(&p, &skel).unwrap(), &deltas).unwrap(), &skel);
        prop_assert!(q.joints[skel.root_index()].norm() < 1e-12);
        for (a, b) in lengths(&p, &skel).iter().zip(lengths(&q, &skel)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn bone_length_keeps_directions(s in any::<u64>(), ratios in prop::collection::vec(0.5..1.5f64, 15)) {
        let skel = SkeletonDef::h36m16();
        let b0 = to_bones(&pose(s), &skel).unwrap();
        let b1 = apply_bone_length(&b0, &ratios).unwrap();
        for i in 0..b0.len() {
            prop_assert!((b0.directions[i] - b1.directions[i]).norm() < 1e-12);
            prop_assert!((b1.lengths[i] - b0.lengths[i] * ratios[i]).abs() < 1e-9);
        }
        prop_assert!(from_bones(&b1, &skel).joints[skel.root_index()].norm() < 1e-12);
    }

    #[test]
    fn kcs_scales_with_uniform_ratio(s in any::<u64>(), ratio in 0.5..2.0f64) {
        let skel = SkeletonDef::h36m16();
        let b0 = to_bones(&pose(s), &skel).unwrap();
        let q = from_bones(&apply_bone_length(&b0, &vec![ratio; b0.len()]).unwrap(), &skel);
        let (k0, k1) = (kcs(&from_bones(&b0, &skel), &skel).unwrap(), kcs(&q, &skel).unwrap());
        prop_assert!((&k0.0 * (ratio * ratio) - &k1.0).amax() <= 1e-9 * k1.0.amax());
    }
}
