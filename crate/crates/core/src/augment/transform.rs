//! Differentiable bone-angle / bone-length / rotation chain.

use nalgebra::{Matrix3, Vector3};

use super::{AugParams, Result};
use crate::skeleton::{
    apply_bone_angle, apply_bone_length, from_bones, rotation_matrix, skew, to_bones, BoneRepr,
    Pose3D, SkeletonDef,
};

/// Gradients of a scalar loss with respect to each [`AugParams`] field.
#[derive(Debug, Clone, PartialEq)]
pub struct AugGrads {
    pub ba: Vec<Vector3<f64>>,
    pub bl: Vec<f64>,
    pub rot: Vector3<f64>,
}

/// Intermediates of [`augment_forward`].
#[derive(Debug, Clone)]
pub struct AugTape {
    perturbed_norm: Vec<f64>,
    directions: Vec<Vector3<f64>>,
    source_lengths: Vec<f64>,
    lengths: Vec<f64>,
    unrotated: Pose3D,
    rot: Vector3<f64>,
}

pub fn augment_forward(
    source: &BoneRepr,
    params: &AugParams,
    skel: &SkeletonDef,
) -> Result<(Pose3D, AugTape)> {
    let angled = apply_bone_angle(source, &params.ba_deltas)?;
    let scaled = apply_bone_length(&angled, &params.bl_ratios)?;
    let unrotated = from_bones(&scaled, skel);
    let r = rotation_matrix(&params.rot_axis_angle);
    let pose = Pose3D::new(unrotated.joints.iter().map(|j| r * j).collect());
    let perturbed_norm = source
        .directions
        .iter()
        .zip(&params.ba_deltas)
        .map(|(d, delta)| (d + delta).norm())
        .collect();
    let tape = AugTape {
        perturbed_norm,
        directions: scaled.directions,
        source_lengths: source.lengths.clone(),
        lengths: scaled.lengths,
        unrotated,
        rot: params.rot_axis_angle,
    };
    Ok((pose, tape))
}

/// Augments a root-relative source pose. The output stays root-relative.
pub fn apply_augmentation(source: &Pose3D, params: &AugParams, skel: &SkeletonDef) -> Result<Pose3D> {
    Ok(augment_forward(&to_bones(source, skel)?, params, skel)?.0)
}

/// Right Jacobian of the rotation exponential at `w`.
fn right_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let t = w.norm();
    let (a, b) = if t < 1e-4 {
        let t2 = t * t;
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        ((1.0 - t.cos()) / (t * t), (t - t.sin()) / (t * t * t))
    };
    let k = skew(w);
    Matrix3::identity() - k * a + k * k * b
}

/// Back-propagates joint gradients of the augmented pose to the parameters.
pub fn augment_backward(tape: &AugTape, joint_grads: &[Vector3<f64>], skel: &SkeletonDef) -> AugGrads {
    let r = rotation_matrix(&tape.rot);
    let rt = r.transpose();
    let mut acc: Vec<Vector3<f64>> = joint_grads.iter().map(|g| rt * g).collect();
    let mut torque = Vector3::zeros();
    for (p, g) in tape.unrotated.joints.iter().zip(&acc) {
        torque += p.cross(g);
    }
    let rot = right_jacobian(&tape.rot).transpose() * torque;

    let n = skel.bone_count();
    let mut ba = vec![Vector3::zeros(); n];
    let mut bl = vec![0.0; n];
    for (b, bone) in skel.bones().iter().enumerate().rev() {
        let gv = acc[bone.child];
        acc[bone.parent] += gv;
        let dir = tape.directions[b];
        let g_len = dir.dot(&gv);
        bl[b] = tape.source_lengths[b] * g_len;
        let g_dir = gv * tape.lengths[b];
        ba[b] = (g_dir - dir * dir.dot(&g_dir)) / tape.perturbed_norm[b];
    }
    AugGrads { ba, bl, rot }
}

/// `scale * tanh(|r|) * r / |r|`, smooth at the origin.
pub fn squash(r: &Vector3<f64>, scale: f64) -> Vector3<f64> {
    r * (scale * tanh_ratio(r.norm()))
}

fn tanh_ratio(s: f64) -> f64 {
    if s < 1e-4 {
        1.0 - s * s / 3.0
    } else {
        s.tanh() / s
    }
}

/// `(d/ds (tanh s / s)) / s`.
fn tanh_ratio_slope(s: f64) -> f64 {
    if s < 1e-4 {
        -2.0 / 3.0 + 8.0 * s * s / 15.0
    } else {
        let sech2 = 1.0 - s.tanh().powi(2);
        (s * sech2 - s.tanh()) / (s * s * s)
    }
}

/// Vector-Jacobian product of [`squash`].
pub fn squash_backward(r: &Vector3<f64>, scale: f64, g: &Vector3<f64>) -> Vector3<f64> {
    let s = r.norm();
    (g * tanh_ratio(s) + r * (tanh_ratio_slope(s) * r.dot(g))) * scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{apply_rotation, to_bones};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng, skel: &SkeletonDef) -> Pose3D {
        let mut joints = vec![Vector3::zeros(); skel.joint_count()];
        for b in skel.bones() {
            let d = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            joints[b.child] = joints[b.parent] + d * 200.0;
        }
        Pose3D::new(joints)
    }

    fn random_params(rng: &mut ChaCha8Rng, n: usize) -> AugParams {
        AugParams {
            ba_deltas: (0..n)
                .map(|_| Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)))
                .collect(),
            bl_ratios: (0..n).map(|_| rng.random_range(0.7..1.3)).collect(),
            rot_axis_angle: Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0)),
        }
    }

    #[test]
    fn identity_and_homogeneity() {
        let skel = SkeletonDef::h36m16();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_pose(&mut rng, &skel);
        let id = AugParams::identity(skel.bone_count());
        let out = apply_augmentation(&p, &id, &skel).unwrap();
        for (a, b) in out.joints.iter().zip(&p.joints) {
            assert!((a - b).norm() < 1e-9);
        }
        let twice = AugParams { bl_ratios: vec![2.0; 15], ..id };
        let out = apply_augmentation(&p, &twice, &skel).unwrap();
        for (a, b) in out.joints.iter().zip(&p.joints) {
            assert!((a - b * 2.0).norm() < 1e-9);
        }
    }

    #[test]
    fn lengths_scale_by_ratio() {
        let skel = SkeletonDef::h36m16();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let p = random_pose(&mut rng, &skel);
            let params = random_params(&mut rng, 15);
            let out = apply_augmentation(&p, &params, &skel).unwrap();
            assert!(out.joints[skel.root_index()].norm() < 1e-12);
            let (before, after) = (to_bones(&p, &skel).unwrap(), to_bones(&out, &skel).unwrap());
            for b in 0..15 {
                assert!((after.lengths[b] - before.lengths[b] * params.bl_ratios[b]).abs() < 1e-9);
            }
            // rotation is applied last
            let unrotated = AugParams { rot_axis_angle: Vector3::zeros(), ..params.clone() };
            let u = apply_augmentation(&p, &unrotated, &skel).unwrap();
            let r = apply_rotation(&u, &params.rot_axis_angle);
            for (a, b) in r.joints.iter().zip(&out.joints) {
                assert!((a - b).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let skel = SkeletonDef::h36m16();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_pose(&mut rng, &skel);
        let bones = to_bones(&p, &skel).unwrap();
        let params = random_params(&mut rng, 15);
        let weights: Vec<Vector3<f64>> = (0..16)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let loss = |q: &AugParams| -> f64 {
            let (pose, _) = augment_forward(&bones, q, &skel).unwrap();
            pose.joints.iter().zip(&weights).map(|(a, w)| a.dot(w)).sum()
        };
        let (_, tape) = augment_forward(&bones, &params, &skel).unwrap();
        let g = augment_backward(&tape, &weights, &skel);
        let h = 1e-6;
        let check = |fd: f64, an: f64| {
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            assert!(rel < 1e-5, "fd {fd} analytic {an}");
        };
        for b in 0..15 {
            for k in 0..3 {
                let mut q = params.clone();
                q.ba_deltas[b][k] += h;
                let lp = loss(&q);
                q.ba_deltas[b][k] -= 2.0 * h;
                check((lp - loss(&q)) / (2.0 * h), g.ba[b][k]);
            }
            let mut q = params.clone();
            q.bl_ratios[b] += h;
            let lp = loss(&q);
            q.bl_ratios[b] -= 2.0 * h;
            check((lp - loss(&q)) / (2.0 * h), g.bl[b]);
        }
        for rot in [params.rot_axis_angle, Vector3::zeros(), Vector3::new(1e-6, 0.0, 2e-6)] {
            let base = AugParams { rot_axis_angle: rot, ..params.clone() };
            let (_, tape) = augment_forward(&bones, &base, &skel).unwrap();
            let g = augment_backward(&tape, &weights, &skel);
            for k in 0..3 {
                let mut q = base.clone();
                q.rot_axis_angle[k] += h;
                let lp = loss(&q);
                q.rot_axis_angle[k] -= 2.0 * h;
                check((lp - loss(&q)) / (2.0 * h), g.rot[k]);
            }
        }
    }

    #[test]
    fn squash_bounds_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for i in 0..200 {
            let mag = if i % 4 == 0 { 1e-6 } else { 3.0 };
            let r = Vector3::new(rng.random_range(-mag..mag), rng.random_range(-mag..mag), rng.random_range(-mag..mag));
            assert!(squash(&r, 0.3).norm() <= 0.3);
            let g = Vector3::new(0.3, -0.7, 1.1);
            let an = squash_backward(&r, 0.3, &g);
            let h = 1e-7;
            for k in 0..3 {
                let (mut a, mut b) = (r, r);
                a[k] += h;
                b[k] -= h;
                let fd = (squash(&a, 0.3).dot(&g) - squash(&b, 0.3).dot(&g)) / (2.0 * h);
                assert!((fd - an[k]).abs() < 1e-6, "{fd} vs {}", an[k]);
            }
        }
        assert_eq!(squash(&Vector3::zeros(), 1.0), Vector3::zeros());
    }
}
