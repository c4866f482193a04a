use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::data::{DataError, Dataset};
use crate::geometry::{normalize_screen, CameraIntrinsics};
use crate::metrics::{evaluate, EvalReport};
use crate::nn::{rmsprop_step, Checkpoint, CheckpointSlice, Mlp, NetworkSpec, NnError, ParamStore, RmsPropState, Tape};
use crate::par::{map_chunks, map_slice, Exec, GRAD_CHUNK};
use crate::skeleton::{Pose2D, Pose3D};

/// Network outputs are metres; poses are millimetres everywhere else.
const OUTPUT_SCALE: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LifterConfig {
    pub hidden_dim: usize,
    pub block_count: usize,
    pub depth_per_block: usize,
    pub slope: f64,
}

impl Default for LifterConfig {
    fn default() -> Self {
        Self { hidden_dim: 256, block_count: 2, depth_per_block: 2, slope: 0.2 }
    }
}

/// Residual MLP from normalized 2D joints (2J) to root-relative 3D joints (3J).
#[derive(Debug, Clone)]
pub struct LifterNet {
    pub store: ParamStore,
    mlp: Mlp,
    joints: usize,
    cfg: LifterConfig,
}

impl LifterNet {
    pub fn new<R: Rng + ?Sized>(cfg: LifterConfig, joints: usize, rng: &mut R) -> Result<Self> {
        let mut net = Self::uninit(cfg, joints)?;
        net.mlp.init_kaiming(net.store.values_mut(), rng, false);
        Ok(net)
    }

    fn uninit(cfg: LifterConfig, joints: usize) -> Result<Self> {
        let spec = NetworkSpec {
            input_dim: 2 * joints,
            output_dim: 3 * joints,
            hidden_dim: cfg.hidden_dim,
            block_count: cfg.block_count,
            depth_per_block: cfg.depth_per_block,
            slope: cfg.slope,
        };
        let mut store = ParamStore::new();
        let mlp = Mlp::build(spec, &mut store, "")?;
        Ok(Self { store, mlp, joints, cfg })
    }

    pub fn config(&self) -> &LifterConfig {
        &self.cfg
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    /// Root-relative pose (mm) from a normalized 2D input vector.
    pub fn predict(&self, input: &[f64]) -> Result<Pose3D> {
        let out = self.mlp.infer(self.store.values(), input)?;
        Ok(Pose3D::new(
            out.chunks_exact(3).map(|c| nalgebra::Vector3::new(c[0], c[1], c[2]) * OUTPUT_SCALE).collect(),
        ))
    }
}

/// Flattened normalized 2D input.
pub fn lifter_input(pose: &Pose2D, cam: &CameraIntrinsics) -> Vec<f64> {
    normalize_screen(pose, cam).to_flat()
}

/// Network plus its optimizer state.
#[derive(Debug, Clone)]
pub struct LifterState {
    pub net: LifterNet,
    pub opt: RmsPropState,
}

/// JSON manifest stored next to a lifter checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifterMeta {
    pub config: LifterConfig,
    pub joints: usize,
    pub seed: u64,
    pub steps: u64,
    /// Next epoch index a resumed pretraining run should use.
    pub next_epoch: usize,
}

const OPT_SLICE: &str = "opt.lifter.v";

fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl LifterState {
    pub fn new<R: Rng + ?Sized>(cfg: LifterConfig, joints: usize, lr: f64, rng: &mut R) -> Result<Self> {
        let net = LifterNet::new(cfg, joints, rng)?;
        let opt = RmsPropState::new(net.store.len(), lr);
        Ok(Self { net, opt })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.net.store.to_checkpoint("lifter.");
        ckpt.slices.push(CheckpointSlice {
            name: OPT_SLICE.into(),
            rows: 1,
            cols: self.opt.second_moment.len(),
            data: self.opt.second_moment.clone(),
        });
        ckpt
    }

    /// Writes the binary checkpoint at `path` and its manifest at `path.json`.
    pub fn save(&self, path: impl AsRef<Path>, meta: &LifterMeta) -> Result<()> {
        let path = path.as_ref();
        self.to_checkpoint().save(path)?;
        let json = serde_json::to_string_pretty(meta).expect("manifest serialization is infallible");
        fs::write(manifest_path(path), json).map_err(NnError::Io)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, lr: f64) -> Result<(Self, LifterMeta)> {
        let path = path.as_ref();
        let text = fs::read_to_string(manifest_path(path)).map_err(NnError::Io)?;
        let meta: LifterMeta = serde_json::from_str(&text)
            .map_err(|e| NnError::BadCheckpoint(format!("manifest: {e}")))?;
        let ckpt = Checkpoint::load(path)?;
        let mut net = LifterNet::uninit(meta.config, meta.joints)?;
        net.store.load_checkpoint(&ckpt, "lifter.")?;
        let mut opt = RmsPropState::new(net.store.len(), lr);
        match ckpt.slice(OPT_SLICE) {
            Some(s) if s.data.len() == opt.second_moment.len() => opt.second_moment.clone_from(&s.data),
            Some(_) => return Err(NnError::BadCheckpoint("optimizer state size mismatch".into()).into()),
            None => {}
        }
        Ok((Self { net, opt }, meta))
    }
}

/// One RMSProp step on the mean squared error (in m²) of a batch. Returns the
/// batch loss in mm².
pub fn lifter_step(state: &mut LifterState, inputs: &[Vec<f64>], targets: &[Pose3D], exec: Exec) -> Result<f64> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(NnError::DimMismatch { expected: targets.len().max(1), got: inputs.len() }.into());
    }
    let net = &state.net;
    let d = 3 * net.joints;
    let scale = 1.0 / (inputs.len() * d) as f64;
    let chunks = map_chunks(exec, inputs.len(), GRAD_CHUNK, |range| -> Result<(Vec<f64>, f64)> {
        let mut grads = vec![0.0; net.store.len()];
        let mut sq = 0.0;
        let mut tape = Tape::default();
        for i in range {
            if targets[i].len() != net.joints {
                return Err(NnError::DimMismatch { expected: net.joints, got: targets[i].len() }.into());
            }
            let out = net.mlp.forward(net.store.values(), &inputs[i], &mut tape)?;
            let target = targets[i].to_flat();
            let g: Vec<f64> = out
                .iter()
                .zip(&target)
                .map(|(p, t)| {
                    let diff = p - t / OUTPUT_SCALE;
                    sq += diff * diff;
                    2.0 * diff * scale
                })
                .collect();
            net.mlp.backward(net.store.values(), &tape, &g, &mut grads)?;
        }
        Ok((grads, sq))
    });
    let mut total = vec![0.0; state.net.store.len()];
    let mut sq = 0.0;
    for c in chunks {
        let (g, s) = c?;
        total.iter_mut().zip(g).for_each(|(t, v)| *t += v);
        sq += s;
    }
    state.net.store.zero_grads();
    state.net.store.accumulate(&total);
    rmsprop_step(&mut state.net.store, &mut state.opt);
    Ok(sq * scale * OUTPUT_SCALE * OUTPUT_SCALE)
}

/// Predictions for every record's 2D pose.
pub fn predict_dataset(net: &LifterNet, ds: &Dataset, exec: Exec) -> Result<Vec<Pose3D>> {
    map_slice(exec, &ds.records, |r| {
        let p2 = r.joints_2d.as_ref().ok_or_else(|| PipelineError::MissingLabels(format!("{} has no joints_2d", r.id)))?;
        net.predict(&lifter_input(p2, &r.camera))
    })
    .into_iter()
    .collect()
}

/// Evaluates lifter predictions on `target` against the sidecar `truth`,
/// matching records by id.
pub fn evaluate_lifter(net: &LifterNet, target: &Dataset, truth: &Dataset, threshold: f64, exec: Exec) -> Result<EvalReport> {
    let preds = predict_dataset(net, target, exec)?;
    let by_id: HashMap<&str, &Pose3D> = truth
        .records
        .iter()
        .filter_map(|r| r.joints_3d.as_ref().map(|p| (r.id.as_str(), p)))
        .collect();
    let mut gts = Vec::with_capacity(preds.len());
    let mut ids = Vec::with_capacity(preds.len());
    for r in &target.records {
        let gt = by_id.get(r.id.as_str()).ok_or_else(|| PipelineError::MissingTruth(r.id.clone()))?;
        gts.push((*gt).clone());
        ids.push(r.id.clone());
    }
    if gts.is_empty() {
        return Err(DataError::EmptyDataset.into());
    }
    Ok(evaluate(&ids, &preds, &gts, threshold, exec)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> LifterConfig {
        LifterConfig { hidden_dim: 16, block_count: 1, depth_per_block: 2, slope: 0.2 }
    }

    #[test]
    fn step_loss_matches_mse_and_exec_modes_agree() {
        let ds = synth_generate(&SynthConfig::source_default(20, 1)).unwrap().dataset;
        let inputs: Vec<Vec<f64>> =
            ds.records.iter().map(|r| lifter_input(r.joints_2d.as_ref().unwrap(), &r.camera)).collect();
        let targets: Vec<Pose3D> = ds.records.iter().map(|r| r.joints_3d.clone().unwrap()).collect();
        let s0 = LifterState::new(small(), 16, 1e-3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        // independent loss: mean over entries of squared mm error
        let mut expect = 0.0;
        for (x, t) in inputs.iter().zip(&targets) {
            let p = s0.net.predict(x).unwrap();
            expect += p.to_flat().iter().zip(t.to_flat()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        expect /= (20 * 48) as f64;
        let (mut a, mut b) = (s0.clone(), s0.clone());
        let la = lifter_step(&mut a, &inputs, &targets, Exec::Sequential).unwrap();
        let lb = lifter_step(&mut b, &inputs, &targets, Exec::Parallel).unwrap();
        assert!((la - expect).abs() <= 1e-9 * expect);
        assert_eq!(la, lb);
        assert_eq!(a.net.store, b.net.store);
        assert_eq!(a.opt, b.opt);
        assert_ne!(a.net.store.values(), s0.net.store.values());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let s = LifterState::new(small(), 16, 1e-4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let meta = LifterMeta { config: small(), joints: 16, seed: 3, steps: 0, next_epoch: 0 };
        let path = dir.path().join("l.ckpt");
        s.save(&path, &meta).unwrap();
        let (back, m) = LifterState::load(&path, 1e-4).unwrap();
        assert_eq!(m, meta);
        assert_eq!(back.net.store.values(), s.net.store.values());
        assert_eq!(back.opt, s.opt);
        assert!(LifterState::load(dir.path().join("missing"), 1e-4).is_err());
    }

    #[test]
    fn evaluation_requires_truth() {
        let out = synth_generate(&SynthConfig::target_default(5, 4)).unwrap();
        let net = LifterNet::new(small(), 16, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let truth = out.truth.unwrap();
        let r = evaluate_lifter(&net, &out.dataset, &truth, 150.0, Exec::Parallel).unwrap();
        assert_eq!(r.count, 5);
        let mut partial = truth.clone();
        partial.records.pop();
        assert!(matches!(
            evaluate_lifter(&net, &out.dataset, &partial, 150.0, Exec::Parallel),
            Err(PipelineError::MissingTruth(_))
        ));
    }
}
