use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::transform::{squash, squash_backward, AugGrads};
use super::{AugBounds, AugParams, AugmentError, Result};
use crate::nn::{Mlp, NetworkSpec, ParamStore, Tape};
use crate::skeleton::{to_bones, BoneRepr, Pose3D, SkeletonDef};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub hidden_dim: usize,
    pub noise_dim: usize,
    pub slope: f64,
    pub bounds: AugBounds,
    /// Gradient weights of the bone-angle, bone-length and rotation heads.
    pub head_weights: [f64; 3],
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { hidden_dim: 256, noise_dim: 32, slope: 0.2, bounds: AugBounds::default(), head_weights: [1.0; 3] }
    }
}

/// Three chained heads producing bone-angle, bone-length and rotation
/// parameters. Each head sees the previous head's output and the shared noise
/// vector; the first head sees the source pose's bone representation.
#[derive(Debug, Clone)]
pub struct GeneratorNet {
    pub store: ParamStore,
    ba: Mlp,
    bl: Mlp,
    rot: Mlp,
    cfg: GeneratorConfig,
    bones: usize,
}

/// Intermediates of one generator forward pass.
#[derive(Debug, Clone, Default)]
pub struct GenTape {
    ba: Tape,
    bl: Tape,
    rot: Tape,
    ba_raw: Vec<f64>,
    bl_raw: Vec<f64>,
    rot_raw: Vector3<f64>,
}

/// Bone directions followed by log bone lengths (metres).
pub fn condition_vector(bones: &BoneRepr) -> Vec<f64> {
    let mut v: Vec<f64> = bones.directions.iter().flat_map(|d| [d.x, d.y, d.z]).collect();
    v.extend(bones.lengths.iter().map(|l| (l / 1000.0).ln()));
    v
}

pub fn sample_noise<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn head_spec(input_dim: usize, output_dim: usize, cfg: &GeneratorConfig) -> NetworkSpec {
    NetworkSpec { input_dim, output_dim, hidden_dim: cfg.hidden_dim, block_count: 1, depth_per_block: 1, slope: cfg.slope }
}

impl GeneratorNet {
    /// Kaiming-initialized heads with zeroed output layers, so the freshly
    /// built generator emits exactly the identity parameters.
    pub fn new<R: Rng + ?Sized>(cfg: GeneratorConfig, skel: &SkeletonDef, rng: &mut R) -> Result<Self> {
        cfg.bounds.validate()?;
        let n = skel.bone_count();
        let z = cfg.noise_dim;
        let mut store = ParamStore::new();
        let ba = Mlp::build(head_spec(4 * n + z, 3 * n, &cfg), &mut store, "ba.")?;
        let bl = Mlp::build(head_spec(3 * n + z, n, &cfg), &mut store, "bl.")?;
        let rot = Mlp::build(head_spec(n + z, 3, &cfg), &mut store, "rot.")?;
        for head in [&ba, &bl, &rot] {
            head.init_kaiming(store.values_mut(), rng, true);
        }
        Ok(Self { store, ba, bl, rot, cfg, bones: n })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn heads(&self) -> [&Mlp; 3] {
        [&self.ba, &self.bl, &self.rot]
    }

    pub fn forward(&self, source: &BoneRepr, noise: &[f64]) -> Result<(AugParams, GenTape)> {
        if noise.len() != self.cfg.noise_dim {
            return Err(AugmentError::DimMismatch { expected: self.cfg.noise_dim, got: noise.len() });
        }
        if source.len() != self.bones {
            return Err(AugmentError::DimMismatch { expected: self.bones, got: source.len() });
        }
        let b = &self.cfg.bounds;
        let p = self.store.values();
        let mut tape = GenTape::default();

        let mut input = condition_vector(source);
        input.extend_from_slice(noise);
        tape.ba_raw = self.ba.forward(p, &input, &mut tape.ba)?;
        let ba_deltas: Vec<Vector3<f64>> = tape
            .ba_raw
            .chunks_exact(3)
            .map(|c| squash(&Vector3::new(c[0], c[1], c[2]), b.ba_max))
            .collect();

        let mut input: Vec<f64> = ba_deltas.iter().flat_map(|d| [d.x, d.y, d.z]).collect();
        input.extend_from_slice(noise);
        tape.bl_raw = self.bl.forward(p, &input, &mut tape.bl)?;
        let bl_ratios: Vec<f64> = tape.bl_raw.iter().map(|r| 1.0 + b.bl_max * r.tanh()).collect();

        let mut input = bl_ratios.clone();
        input.extend_from_slice(noise);
        let r = self.rot.forward(p, &input, &mut tape.rot)?;
        tape.rot_raw = Vector3::new(r[0], r[1], r[2]);
        let rot_axis_angle = squash(&tape.rot_raw, b.rot_max);

        Ok((AugParams { ba_deltas, bl_ratios, rot_axis_angle }, tape))
    }

    /// Back-propagates parameter gradients through all three heads into
    /// `grads` (shaped like [`GeneratorNet::store`]), applying head weights.
    pub fn backward(&self, tape: &GenTape, g: &AugGrads, grads: &mut [f64]) -> Result<()> {
        let b = &self.cfg.bounds;
        let p = self.store.values();
        let w = self.cfg.head_weights;
        let z = self.cfg.noise_dim;

        // rotation head
        let g_raw = squash_backward(&tape.rot_raw, b.rot_max, &g.rot);
        let g_in = self.weighted_backward(&self.rot, w[2], p, &tape.rot, g_raw.as_slice(), grads)?;
        let g_bl: Vec<f64> = g.bl.iter().zip(&g_in[..self.bones]).map(|(a, c)| a + c).collect();

        // bone-length head
        let g_raw: Vec<f64> = g_bl
            .iter()
            .zip(&tape.bl_raw)
            .map(|(gr, r)| gr * b.bl_max * (1.0 - r.tanh().powi(2)))
            .collect();
        let g_in = self.weighted_backward(&self.bl, w[1], p, &tape.bl, &g_raw, grads)?;
        debug_assert_eq!(g_in.len(), 3 * self.bones + z);

        // bone-angle head
        let g_raw: Vec<f64> = tape
            .ba_raw
            .chunks_exact(3)
            .enumerate()
            .flat_map(|(i, c)| {
                let up = Vector3::new(g_in[3 * i], g_in[3 * i + 1], g_in[3 * i + 2]);
                let gd = squash_backward(&Vector3::new(c[0], c[1], c[2]), b.ba_max, &(g.ba[i] + up));
                [gd.x, gd.y, gd.z]
            })
            .collect();
        self.weighted_backward(&self.ba, w[0], p, &tape.ba, &g_raw, grads)?;
        Ok(())
    }

    /// Head backward whose parameter gradient is scaled by `weight` while the
    /// gradient passed upstream is not.
    fn weighted_backward(
        &self,
        head: &Mlp,
        weight: f64,
        params: &[f64],
        tape: &Tape,
        g_out: &[f64],
        grads: &mut [f64],
    ) -> Result<Vec<f64>> {
        if weight == 1.0 {
            return Ok(head.backward(params, tape, g_out, grads)?);
        }
        let range = head.param_range();
        let before: Vec<f64> = grads[range.clone()].to_vec();
        let g_in = head.backward(params, tape, g_out, grads)?;
        for (g, b) in grads[range].iter_mut().zip(before) {
            *g = b + weight * (*g - b);
        }
        Ok(g_in)
    }

    pub fn generate_aug_params(&self, source: &Pose3D, noise: &[f64], skel: &SkeletonDef) -> Result<AugParams> {
        Ok(self.forward(&to_bones(source, skel)?, noise)?.0)
    }
}

impl Default for AugBounds {
    fn default() -> Self {
        Self { ba_max: 0.3, bl_max: 0.3, rot_max: PI }
    }
}
