use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AugmentError, Result};
use crate::nn::{clip_weights, Mlp, NetworkSpec, ParamStore, Tape};
use crate::skeleton::{bone_vectors, BodyPart, Pose3D, SkeletonDef};

/// KCS entries are fed to the critic in m² rather than mm².
pub const KCS_INPUT_SCALE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub hidden_dim: usize,
    /// Output width of each part network.
    pub feature_dim: usize,
    pub slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { hidden_dim: 256, feature_dim: 8, slope: 0.2 }
    }
}

/// WGAN critic over per-part KCS blocks.
///
/// Each of the five body parts owns a residual MLP that reads the flattened
/// intra-part Gram matrix of its bones. A single affine fusion layer maps the
/// concatenated part features to an unbounded score.
#[derive(Debug, Clone)]
pub struct AnchorDiscriminatorNet {
    pub store: ParamStore,
    parts: Vec<Mlp>,
    fusion: Mlp,
    part_bones: Vec<Vec<usize>>,
    cfg: DiscriminatorConfig,
    joints: usize,
}

#[derive(Debug, Clone)]
pub struct DiscTape {
    bones: Vec<Vector3<f64>>,
    parts: Vec<Tape>,
    fusion: Tape,
}

impl AnchorDiscriminatorNet {
    pub fn new<R: Rng + ?Sized>(
        cfg: DiscriminatorConfig,
        skel: &SkeletonDef,
        rng: &mut R,
        clip: Option<f64>,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let part_bones: Vec<Vec<usize>> = BodyPart::ALL.iter().map(|p| skel.part_bones(*p).to_vec()).collect();
        let parts = part_bones
            .iter()
            .zip(BodyPart::ALL)
            .map(|(bones, part)| {
                let spec = NetworkSpec {
                    input_dim: bones.len() * bones.len(),
                    output_dim: cfg.feature_dim,
                    hidden_dim: cfg.hidden_dim,
                    block_count: 1,
                    depth_per_block: 2,
                    slope: cfg.slope,
                };
                Mlp::build(spec, &mut store, &format!("{}.", part_name(part)))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let fusion = Mlp::build(
            NetworkSpec {
                input_dim: 5 * cfg.feature_dim,
                output_dim: 1,
                hidden_dim: 1,
                block_count: 0,
                depth_per_block: 0,
                slope: cfg.slope,
            },
            &mut store,
            "fusion.",
        )?;
        for net in parts.iter().chain(std::iter::once(&fusion)) {
            net.init_kaiming(store.values_mut(), rng, false);
        }
        if let Some(c) = clip {
            clip_weights(&mut store, c)?;
        }
        Ok(Self { store, parts, fusion, part_bones, cfg, joints: skel.joint_count() })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn part_networks(&self) -> &[Mlp] {
        &self.parts
    }

    pub fn part_bones(&self) -> &[Vec<usize>] {
        &self.part_bones
    }

    fn part_input(&self, part: usize, bones: &[Vector3<f64>]) -> Vec<f64> {
        let idx = &self.part_bones[part];
        let mut out = Vec::with_capacity(idx.len() * idx.len());
        for &a in idx {
            for &b in idx {
                out.push(bones[a].dot(&bones[b]) * KCS_INPUT_SCALE);
            }
        }
        out
    }

    pub fn critic_with_tape(&self, pose: &Pose3D, skel: &SkeletonDef) -> Result<(f64, DiscTape)> {
        if pose.len() != self.joints {
            return Err(AugmentError::DimMismatch { expected: self.joints, got: pose.len() });
        }
        let bones = bone_vectors(pose, skel)?;
        let p = self.store.values();
        let mut tapes = Vec::with_capacity(5);
        let mut features = Vec::with_capacity(5 * self.cfg.feature_dim);
        for (i, net) in self.parts.iter().enumerate() {
            let mut tape = Tape::default();
            features.extend(net.forward(p, &self.part_input(i, &bones), &mut tape)?);
            tapes.push(tape);
        }
        let mut fusion = Tape::default();
        let score = self.fusion.forward(p, &features, &mut fusion)?[0];
        Ok((score, DiscTape { bones, parts: tapes, fusion }))
    }

    /// Critic score of a root-relative pose.
    pub fn critic(&self, pose: &Pose3D, skel: &SkeletonDef) -> Result<f64> {
        Ok(self.critic_with_tape(pose, skel)?.0)
    }

    /// Accumulates `g_score * ∂score/∂θ` into `grads` and returns the
    /// gradient of the score (times `g_score`) with respect to the joints.
    pub fn backward(&self, tape: &DiscTape, g_score: f64, skel: &SkeletonDef, grads: &mut [f64]) -> Result<Vec<Vector3<f64>>> {
        let p = self.store.values();
        let g_feat = self.fusion.backward(p, &tape.fusion, &[g_score], grads)?;
        let mut g_bones = vec![Vector3::zeros(); tape.bones.len()];
        let f = self.cfg.feature_dim;
        for (i, net) in self.parts.iter().enumerate() {
            let g_in = net.backward(p, &tape.parts[i], &g_feat[i * f..(i + 1) * f], grads)?;
            let idx = &self.part_bones[i];
            let n = idx.len();
            for (ai, &a) in idx.iter().enumerate() {
                for (bi, &b) in idx.iter().enumerate() {
                    let g = g_in[ai * n + bi] * KCS_INPUT_SCALE;
                    g_bones[a] += tape.bones[b] * g;
                    g_bones[b] += tape.bones[a] * g;
                }
            }
        }
        let mut g_joints = vec![Vector3::zeros(); self.joints];
        for (bone, g) in skel.bones().iter().zip(&g_bones) {
            g_joints[bone.child] += g;
            g_joints[bone.parent] -= g;
        }
        Ok(g_joints)
    }
}

fn part_name(p: BodyPart) -> &'static str {
    match p {
        BodyPart::Torso => "torso",
        BodyPart::LeftArm => "left_arm",
        BodyPart::RightArm => "right_arm",
        BodyPart::LeftLeg => "left_leg",
        BodyPart::RightLeg => "right_leg",
    }
}

/// Critic score of `pose`.
pub fn discriminate(d: &AnchorDiscriminatorNet, pose: &Pose3D, skel: &SkeletonDef) -> Result<f64> {
    d.critic(pose, skel)
}
