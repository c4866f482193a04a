//! Local pose augmentation: a generator of bone-angle, bone-length and
//! rotation perturbations trained against a KCS anchor critic with the
//! Wasserstein objective.

mod discriminator;
mod generator;
mod transform;

pub use discriminator::{discriminate, AnchorDiscriminatorNet, DiscTape, DiscriminatorConfig, KCS_INPUT_SCALE};
pub use generator::{condition_vector, sample_noise, GenTape, GeneratorConfig, GeneratorNet};
pub use transform::{apply_augmentation, augment_backward, augment_forward, squash, AugGrads, AugTape};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::NnError;
use crate::par::{map_chunks, Exec, GRAD_CHUNK};
use crate::skeleton::{BoneRepr, Pose3D, SkeletonDef, SkeletonError};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid augmentation bounds: {0}")]
    BadBounds(String),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, AugmentError>;

/// Ranges of the generated transforms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugBounds {
    /// Max norm of each bone-direction perturbation.
    pub ba_max: f64,
    /// Bone-length ratios lie in `[1 - bl_max, 1 + bl_max]`.
    pub bl_max: f64,
    /// Max rotation angle (radians).
    pub rot_max: f64,
}

impl AugBounds {
    pub fn validate(&self) -> Result<()> {
        if !(self.ba_max >= 0.0 && self.bl_max >= 0.0 && self.bl_max < 1.0 && self.rot_max >= 0.0) {
            return Err(AugmentError::BadBounds(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugParams {
    pub ba_deltas: Vec<Vector3<f64>>,
    pub bl_ratios: Vec<f64>,
    pub rot_axis_angle: Vector3<f64>,
}

impl AugParams {
    pub fn identity(bones: usize) -> Self {
        Self { ba_deltas: vec![Vector3::zeros(); bones], bl_ratios: vec![1.0; bones], rot_axis_angle: Vector3::zeros() }
    }

    pub fn satisfies(&self, b: &AugBounds) -> bool {
        const SLACK: f64 = 1e-12;
        self.ba_deltas.iter().all(|d| d.norm() <= b.ba_max + SLACK)
            && self.bl_ratios.iter().all(|r| (r - 1.0).abs() <= b.bl_max + SLACK)
            && self.rot_axis_angle.norm() <= b.rot_max + SLACK
    }
}

/// `mean(fake) - mean(real)`.
pub fn wasserstein_critic_loss(real_scores: &[f64], fake_scores: &[f64]) -> Result<f64> {
    if real_scores.is_empty() || fake_scores.is_empty() {
        return Err(AugmentError::EmptyBatch);
    }
    Ok(mean(fake_scores) - mean(real_scores))
}

/// `-mean(fake)`.
pub fn wasserstein_generator_loss(fake_scores: &[f64]) -> Result<f64> {
    if fake_scores.is_empty() {
        return Err(AugmentError::EmptyBatch);
    }
    Ok(-mean(fake_scores))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sum_buffers(len: usize, parts: Vec<Vec<f64>>) -> Vec<f64> {
    let mut total = vec![0.0; len];
    for p in parts {
        total.iter_mut().zip(p).for_each(|(t, v)| *t += v);
    }
    total
}

/// Critic loss on a real/fake batch. Zeroes and then fills the critic's
/// gradient buffer.
pub fn d_loss(
    d: &mut AnchorDiscriminatorNet,
    real: &[Pose3D],
    fake: &[Pose3D],
    skel: &SkeletonDef,
    exec: Exec,
) -> Result<f64> {
    if real.is_empty() || fake.is_empty() {
        return Err(AugmentError::EmptyBatch);
    }
    let (nr, nf) = (real.len(), fake.len());
    let all: Vec<(&Pose3D, f64)> = real
        .iter()
        .map(|p| (p, -1.0 / nr as f64))
        .chain(fake.iter().map(|p| (p, 1.0 / nf as f64)))
        .collect();
    let dref = &*d;
    let chunks = map_chunks(exec, all.len(), GRAD_CHUNK, |range| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut grads = vec![0.0; dref.store.len()];
        let mut scores = Vec::with_capacity(range.len());
        for &(pose, coeff) in &all[range] {
            let (s, tape) = dref.critic_with_tape(pose, skel)?;
            dref.backward(&tape, coeff, skel, &mut grads)?;
            scores.push(s);
        }
        Ok((grads, scores))
    });
    let mut scores = Vec::with_capacity(all.len());
    let mut buffers = Vec::with_capacity(chunks.len());
    for c in chunks {
        let (g, s) = c?;
        buffers.push(g);
        scores.extend(s);
    }
    let loss = wasserstein_critic_loss(&scores[..nr], &scores[nr..])?;
    let total = sum_buffers(d.store.len(), buffers);
    d.store.zero_grads();
    d.store.accumulate(&total);
    Ok(loss)
}

/// Generator loss through augmentation, KCS and the frozen critic. Zeroes and
/// then fills the generator's gradient buffer.
pub fn g_loss(
    gen: &mut GeneratorNet,
    d: &AnchorDiscriminatorNet,
    sources: &[BoneRepr],
    noises: &[Vec<f64>],
    skel: &SkeletonDef,
    exec: Exec,
) -> Result<f64> {
    if sources.is_empty() {
        return Err(AugmentError::EmptyBatch);
    }
    if noises.len() != sources.len() {
        return Err(AugmentError::DimMismatch { expected: sources.len(), got: noises.len() });
    }
    let n = sources.len();
    let coeff = -1.0 / n as f64;
    let gref = &*gen;
    let chunks = map_chunks(exec, n, GRAD_CHUNK, |range| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut grads = vec![0.0; gref.store.len()];
        let mut scratch = vec![0.0; d.store.len()];
        let mut scores = Vec::with_capacity(range.len());
        for i in range {
            let (params, gtape) = gref.forward(&sources[i], &noises[i])?;
            let (pose, atape) = augment_forward(&sources[i], &params, skel)?;
            let (s, dtape) = d.critic_with_tape(&pose, skel)?;
            let gj = d.backward(&dtape, coeff, skel, &mut scratch)?;
            let ga = augment_backward(&atape, &gj, skel);
            gref.backward(&gtape, &ga, &mut grads)?;
            scores.push(s);
        }
        Ok((grads, scores))
    });
    let mut scores = Vec::with_capacity(n);
    let mut buffers = Vec::with_capacity(chunks.len());
    for c in chunks {
        let (g, s) = c?;
        buffers.push(g);
        scores.extend(s);
    }
    let loss = wasserstein_generator_loss(&scores)?;
    let total = sum_buffers(gen.store.len(), buffers);
    gen.store.zero_grads();
    gen.store.accumulate(&total);
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::to_bones;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn loss_arithmetic_on_stubbed_scores() {
        assert_eq!(wasserstein_critic_loss(&[1.0, 3.0], &[0.0, 2.0]).unwrap(), -1.0);
        assert_eq!(wasserstein_critic_loss(&[0.5, 0.5], &[0.5, 0.5, 0.5]).unwrap(), 0.0);
        assert_eq!(wasserstein_generator_loss(&[0.0, 2.0]).unwrap(), -1.0);
        assert!(matches!(wasserstein_critic_loss(&[], &[1.0]), Err(AugmentError::EmptyBatch)));
        assert!(matches!(wasserstein_generator_loss(&[]), Err(AugmentError::EmptyBatch)));
        // generator loss is the critic loss with the real term removed
        let fake = [0.3, -1.7, 2.2];
        let zero_real = wasserstein_critic_loss(&[0.0], &fake).unwrap();
        assert_eq!(wasserstein_generator_loss(&fake).unwrap(), -zero_real);
    }

    fn poses(rng: &mut ChaCha8Rng, skel: &SkeletonDef, n: usize) -> Vec<Pose3D> {
        (0..n)
            .map(|_| {
                let mut joints = vec![Vector3::zeros(); skel.joint_count()];
                for b in skel.bones() {
                    let d = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                    joints[b.child] = joints[b.parent] + d * 300.0;
                }
                Pose3D::new(joints)
            })
            .collect()
    }

    #[test]
    fn d_loss_properties() {
        let skel = SkeletonDef::h36m16();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut d = AnchorDiscriminatorNet::new(
            DiscriminatorConfig { hidden_dim: 8, ..Default::default() },
            &skel,
            &mut rng,
            None,
        )
        .unwrap();
        let batch = poses(&mut rng, &skel, 5);
        assert_eq!(d_loss(&mut d, &batch, &batch, &skel, Exec::Parallel).unwrap(), 0.0);
        assert!(d.store.grads().iter().all(|g| g.abs() < 1e-12));
        let other = poses(&mut rng, &skel, 11);
        let seq = d_loss(&mut d, &batch, &other, &skel, Exec::Sequential).unwrap();
        let gs = d.store.grads().to_vec();
        let par = d_loss(&mut d, &batch, &other, &skel, Exec::Parallel).unwrap();
        assert_eq!(seq, par);
        assert_eq!(gs, d.store.grads());
        // constant critic: zero every weight, leave a fusion bias
        d.store.values_mut().iter_mut().for_each(|v| *v = 0.0);
        let last = d.store.len() - 1;
        d.store.values_mut()[last] = 3.0;
        assert_eq!(d_loss(&mut d, &batch, &other, &skel, Exec::Parallel).unwrap(), 0.0);
        assert!(matches!(d_loss(&mut d, &[], &other, &skel, Exec::Parallel), Err(AugmentError::EmptyBatch)));
    }

    #[test]
    fn g_loss_matches_critic_scores() {
        let skel = SkeletonDef::h36m16();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cfg = GeneratorConfig { hidden_dim: 8, noise_dim: 4, ..Default::default() };
        let mut gen = GeneratorNet::new(cfg, &skel, &mut rng).unwrap();
        let d = AnchorDiscriminatorNet::new(DiscriminatorConfig { hidden_dim: 8, ..Default::default() }, &skel, &mut rng, None).unwrap();
        let src = poses(&mut rng, &skel, 6);
        let bones: Vec<BoneRepr> = src.iter().map(|p| to_bones(p, &skel).unwrap()).collect();
        let noise: Vec<Vec<f64>> = (0..6).map(|_| sample_noise(&mut rng, 4)).collect();
        let loss = g_loss(&mut gen, &d, &bones, &noise, &skel, Exec::Parallel).unwrap();
        // identity generator: fakes are the sources
        let scores: Vec<f64> = src.iter().map(|p| d.critic(p, &skel).unwrap()).collect();
        assert!((loss - wasserstein_generator_loss(&scores).unwrap()).abs() < 1e-9);
        assert!(gen.store.grads().iter().any(|g| *g != 0.0));
    }
}
