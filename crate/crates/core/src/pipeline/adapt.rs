use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::lifter::{evaluate_lifter, lifter_input, lifter_step, LifterState};
use super::pretrain::supervised_pairs;
use super::{batch_indices, config_hash, derive_rng, tags, AdaptMode, LifterUpdate, PipelineError, Result, TrainConfig};
use crate::augment::{
    augment_forward, d_loss, g_loss, sample_noise, AnchorDiscriminatorNet, AugParams, GeneratorNet,
};
use crate::data::{pairing_plan_with, Dataset, DataError, Domain, PoseRecord};
use crate::geometry::{gpa_solve, project_pose, RootPosition};
use crate::nn::{clip_weights, max_abs, rmsprop_step, Checkpoint, CheckpointSlice, NnError, ParamStore, RmsPropState};
use crate::par::{map_indexed, Exec};
use crate::skeleton::{to_bones, BoneRepr, Pose2D, Pose3D, SkeletonDef};

/// How the augmented 3D pose is placed in front of the target camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Placement {
    /// Closed-form root from the paired target's 2D pose.
    Gpa,
    /// Fixed root on the optical axis at `depth` mm.
    Canonical { depth: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    /// Normalized 2D lifter input.
    pub input: Vec<f64>,
    /// Projected 2D pose in target pixels.
    pub pixels: Pose2D,
    /// Root-relative augmented 3D pose (mm).
    pub pose_3d: Pose3D,
    pub root: RootPosition,
}

/// Augments (when `params` is given), places and projects one source pose
/// into the paired target's camera.
pub fn build_training_pair_with(
    source_3d: &Pose3D,
    source_bones: &BoneRepr,
    target: &PoseRecord,
    params: Option<&AugParams>,
    placement: Placement,
    skel: &SkeletonDef,
) -> Result<TrainingPair> {
    let pose_3d = match params {
        Some(p) => augment_forward(source_bones, p, skel)?.0,
        None => source_3d.clone(),
    };
    let cam = target.camera;
    let root = match placement {
        Placement::Gpa => {
            let t2 = target
                .joints_2d
                .as_ref()
                .ok_or_else(|| PipelineError::MissingLabels(format!("target {} has no joints_2d", target.id)))?;
            gpa_solve(t2, skel.root_index(), &pose_3d, &cam)?
        }
        Placement::Canonical { depth } => RootPosition::new(0.0, 0.0, depth),
    };
    let pixels = project_pose(&pose_3d, &root, &cam)?;
    Ok(TrainingPair { input: lifter_input(&pixels, &cam), pixels, pose_3d, root })
}

/// Builds one training pair, drawing the generator noise from `rng`.
pub fn build_training_pair<R: Rng + ?Sized>(
    source: &PoseRecord,
    target: &PoseRecord,
    gen: Option<&GeneratorNet>,
    skel: &SkeletonDef,
    placement: Placement,
    rng: &mut R,
) -> Result<TrainingPair> {
    let s3 = source
        .joints_3d
        .as_ref()
        .ok_or_else(|| PipelineError::MissingLabels(format!("source {} has no joints_3d", source.id)))?;
    let bones = to_bones(s3, skel)?;
    let params = match gen {
        Some(g) => Some(g.forward(&bones, &sample_noise(rng, g.config().noise_dim))?.0),
        None => None,
    };
    build_training_pair_with(s3, &bones, target, params.as_ref(), placement, skel)
}

/// Generator, critic and their optimizer states.
#[derive(Debug, Clone)]
pub struct GanState {
    pub gen: GeneratorNet,
    pub disc: AnchorDiscriminatorNet,
    pub gen_opt: RmsPropState,
    pub disc_opt: RmsPropState,
}

fn opt_slice(name: &str, opt: &RmsPropState) -> CheckpointSlice {
    CheckpointSlice { name: name.into(), rows: 1, cols: opt.second_moment.len(), data: opt.second_moment.clone() }
}

fn load_opt(ckpt: &Checkpoint, name: &str, opt: &mut RmsPropState) -> Result<()> {
    let s = ckpt.slice(name).ok_or_else(|| NnError::MissingSlice(name.into()))?;
    if s.data.len() != opt.second_moment.len() {
        return Err(NnError::BadCheckpoint(format!("{name}: size mismatch")).into());
    }
    opt.second_moment.clone_from(&s.data);
    Ok(())
}

impl GanState {
    /// Identity-initialized generator and clipped critic seeded from `cfg.seed`.
    pub fn new(cfg: &TrainConfig, skel: &SkeletonDef) -> Result<Self> {
        let gen = GeneratorNet::new(cfg.generator_config(), skel, &mut derive_rng(cfg.seed, tags::INIT_GENERATOR, 0, 0))?;
        let disc = AnchorDiscriminatorNet::new(
            cfg.discriminator,
            skel,
            &mut derive_rng(cfg.seed, tags::INIT_DISCRIMINATOR, 0, 0),
            Some(cfg.clip),
        )?;
        let gen_opt = RmsPropState::new(gen.store.len(), cfg.lr_generator);
        let disc_opt = RmsPropState::new(disc.store.len(), cfg.lr_discriminator);
        Ok(Self { gen, disc, gen_opt, disc_opt })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = self.gen.store.to_checkpoint("gen.").merge(self.disc.store.to_checkpoint("disc."));
        c.slices.push(opt_slice("opt.gen.v", &self.gen_opt));
        c.slices.push(opt_slice("opt.disc.v", &self.disc_opt));
        c
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    /// Overwrites parameters and optimizer state from a checkpoint written by
    /// [`GanState::save`] for the same config.
    pub fn load_from(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.gen.store.load_checkpoint(ckpt, "gen.")?;
        self.disc.store.load_checkpoint(ckpt, "disc.")?;
        load_opt(ckpt, "opt.gen.v", &mut self.gen_opt)?;
        load_opt(ckpt, "opt.disc.v", &mut self.disc_opt)
    }
}

/// State captured when a loss or parameter becomes non-finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NanDump {
    pub stage: String,
    pub epoch: usize,
    pub iteration: usize,
    pub loss: f64,
    pub lifter_max_abs: f64,
    pub generator_max_abs: Option<f64>,
    pub discriminator_max_abs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean critic loss over this epoch's critic steps.
    pub d_loss: Option<f64>,
    pub g_loss: Option<f64>,
    /// Mean lifter batch loss (mm²).
    pub lifter_loss: Option<f64>,
    pub d_steps: usize,
    pub g_steps: usize,
    pub lifter_steps: usize,
    /// Largest critic parameter magnitude at epoch end.
    pub d_max_abs: f64,
    pub target_mpjpe: Option<f64>,
    pub target_pa_mpjpe: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub seed: u64,
    pub config_hash: String,
    pub mode: AdaptMode,
    pub epochs: Vec<EpochReport>,
}

impl AdaptReport {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs.iter().map(|e| serde_json::to_string(e).expect("serializable") + "\n").collect()
    }
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub report: AdaptReport,
    /// Kept out of the report so reports stay reproducible.
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdaptEvent {
    DiscriminatorStep { epoch: usize, iteration: usize, loss: f64, max_abs: f64 },
    GeneratorStep { epoch: usize, iteration: usize, loss: f64 },
    LifterStep { epoch: usize, iteration: usize, loss: f64, augmented: usize, original: usize },
    EpochEnd(EpochReport),
}

fn all_finite(store: &ParamStore) -> bool {
    store.values().iter().all(|v| v.is_finite())
}

struct Loop<'a> {
    cfg: &'a TrainConfig,
    skel: &'a SkeletonDef,
    exec: Exec,
    source: &'a Dataset,
    target: &'a Dataset,
    src_inputs: Vec<Vec<f64>>,
    src_poses: Vec<Pose3D>,
    src_bones: Vec<BoneRepr>,
}

impl Loop<'_> {
    fn nan(&self, stage: &str, epoch: usize, iteration: usize, loss: f64, lifter: &LifterState, gan: &GanState) -> PipelineError {
        let gan_used = self.cfg.mode.uses_generator();
        PipelineError::NanDetected(Box::new(NanDump {
            stage: stage.into(),
            epoch,
            iteration,
            loss,
            lifter_max_abs: max_abs(lifter.net.store.values()),
            generator_max_abs: gan_used.then(|| max_abs(gan.gen.store.values())),
            discriminator_max_abs: gan_used.then(|| max_abs(gan.disc.store.values())),
        }))
    }

    fn augmented_poses(&self, gen: &GeneratorNet, idx: &[usize], noises: &[Vec<f64>]) -> Result<Vec<Pose3D>> {
        map_indexed(self.exec, idx.len(), |k| -> Result<Pose3D> {
            let bones = &self.src_bones[idx[k]];
            let params = gen.forward(bones, &noises[k])?.0;
            Ok(augment_forward(bones, &params, self.skel)?.0)
        })
        .into_iter()
        .collect()
    }

    fn placement(&self) -> Placement {
        match self.cfg.mode {
            AdaptMode::LpaOnly => Placement::Canonical { depth: self.cfg.canonical_depth },
            _ => Placement::Gpa,
        }
    }

    /// Mixed lifter batch: the first share of `idx` becomes augmented pairs,
    /// the rest stay original source pairs.
    fn mixed_batch(
        &self,
        gen: &GeneratorNet,
        idx: &[usize],
        targets: &[usize],
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<(Vec<Vec<f64>>, Vec<Pose3D>, usize)> {
        let (na, _) = self.cfg.mix_counts();
        let mut inputs = Vec::with_capacity(idx.len());
        let mut poses = Vec::with_capacity(idx.len());
        if self.cfg.mode == AdaptMode::None {
            for &i in idx {
                inputs.push(self.src_inputs[i].clone());
                poses.push(self.src_poses[i].clone());
            }
            return Ok((inputs, poses, na));
        }
        let noises: Vec<Vec<f64>> = if self.cfg.mode.uses_generator() {
            (0..na).map(|_| sample_noise(rng, gen.config().noise_dim)).collect()
        } else {
            Vec::new()
        };
        let placement = self.placement();
        let pairs = map_indexed(self.exec, na, |k| -> Result<TrainingPair> {
            let i = idx[k];
            let params = match noises.get(k) {
                Some(z) => Some(gen.forward(&self.src_bones[i], z)?.0),
                None => None,
            };
            let tar = &self.target.records[targets[i]];
            build_training_pair_with(&self.src_poses[i], &self.src_bones[i], tar, params.as_ref(), placement, self.skel)
        });
        for p in pairs {
            let p = p?;
            inputs.push(p.input);
            poses.push(p.pose_3d);
        }
        for &i in &idx[na..] {
            inputs.push(self.src_inputs[i].clone());
            poses.push(self.src_poses[i].clone());
        }
        Ok((inputs, poses, na))
    }
}

/// Runs the adaptation loop. The target dataset is never read for 3D; the
/// optional `truth` sidecar is only used for per-epoch evaluation.
#[allow(clippy::too_many_arguments)]
pub fn adapt(
    lifter: &mut LifterState,
    gan: &mut GanState,
    source: &Dataset,
    target: &Dataset,
    truth: Option<&Dataset>,
    cfg: &TrainConfig,
    exec: Exec,
    observer: &mut dyn FnMut(&AdaptEvent),
) -> Result<AdaptOutcome> {
    let start = Instant::now();
    cfg.validate()?;
    let skel = &source.skeleton;
    if target.is_empty() {
        return Err(DataError::EmptyDataset.into());
    }
    if target.domain != Domain::Target || target.records.iter().any(|r| r.joints_2d.is_none()) {
        return Err(PipelineError::MissingLabels("target must be a 2D-only target dataset".into()));
    }
    let (src_inputs, src_poses) = supervised_pairs(source)?;
    let src_bones = src_poses.iter().map(|p| to_bones(p, skel)).collect::<std::result::Result<Vec<_>, _>>()?;
    let lp = Loop { cfg, skel, exec, source, target, src_inputs, src_poses, src_bones };
    lifter.opt.lr = cfg.lr_lifter;
    gan.gen_opt.lr = cfg.lr_generator;
    gan.disc_opt.lr = cfg.lr_discriminator;

    let mut report =
        AdaptReport { seed: cfg.seed, config_hash: config_hash(cfg), mode: cfg.mode, epochs: Vec::with_capacity(cfg.epochs) };
    let ns = lp.source.len();
    for epoch in 0..cfg.epochs {
        let plan = pairing_plan_with(cfg.pairing, ns, target.len(), epoch as u64, cfg.seed)?;
        let (mut d_sum, mut g_sum, mut l_sum) = (0.0, 0.0, 0.0);
        let (mut d_steps, mut g_steps, mut l_steps) = (0, 0, 0);
        for it in 0..cfg.iters_per_epoch {
            let idx = batch_indices(ns, cfg.batch_size, cfg.seed, epoch as u64, it as u64);
            let mut rng = derive_rng(cfg.seed, tags::NOISE, epoch as u64, it as u64);
            if cfg.mode.uses_generator() {
                let noises: Vec<Vec<f64>> =
                    (0..idx.len()).map(|_| sample_noise(&mut rng, gan.gen.config().noise_dim)).collect();
                if (it + 1) % cfg.generator_interval == 0 {
                    let bones: Vec<BoneRepr> = idx.iter().map(|&i| lp.src_bones[i].clone()).collect();
                    let loss = g_loss(&mut gan.gen, &gan.disc, &bones, &noises, skel, exec)?;
                    rmsprop_step(&mut gan.gen.store, &mut gan.gen_opt);
                    if !loss.is_finite() || !all_finite(&gan.gen.store) {
                        return Err(lp.nan("generator", epoch, it, loss, lifter, gan));
                    }
                    g_sum += loss;
                    g_steps += 1;
                    observer(&AdaptEvent::GeneratorStep { epoch, iteration: it, loss });
                } else {
                    let real: Vec<Pose3D> = idx.iter().map(|&i| lp.src_poses[i].clone()).collect();
                    let fake = lp.augmented_poses(&gan.gen, &idx, &noises)?;
                    let loss = d_loss(&mut gan.disc, &real, &fake, skel, exec)?;
                    rmsprop_step(&mut gan.disc.store, &mut gan.disc_opt);
                    clip_weights(&mut gan.disc.store, cfg.clip)?;
                    if !loss.is_finite() || !all_finite(&gan.disc.store) {
                        return Err(lp.nan("discriminator", epoch, it, loss, lifter, gan));
                    }
                    d_sum += loss;
                    d_steps += 1;
                    let max_abs = max_abs(gan.disc.store.values());
                    observer(&AdaptEvent::DiscriminatorStep { epoch, iteration: it, loss, max_abs });
                }
            }
            let lifter_now = epoch >= cfg.warmup_epochs
                && match cfg.lifter_update {
                    LifterUpdate::PerIteration => true,
                    LifterUpdate::PerEpoch => it + 1 == cfg.iters_per_epoch,
                };
            if lifter_now {
                let (x, y, na) = lp.mixed_batch(&gan.gen, &idx, &plan.targets, &mut rng)?;
                let loss = lifter_step(lifter, &x, &y, exec)?;
                if !loss.is_finite() || !all_finite(&lifter.net.store) {
                    return Err(lp.nan("lifter", epoch, it, loss, lifter, gan));
                }
                l_sum += loss;
                l_steps += 1;
                observer(&AdaptEvent::LifterStep { epoch, iteration: it, loss, augmented: na, original: x.len() - na });
            }
        }
        let eval = truth
            .map(|t| evaluate_lifter(&lifter.net, target, t, cfg.pck_threshold, exec))
            .transpose()?;
        let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
        let entry = EpochReport {
            epoch,
            d_loss: mean(d_sum, d_steps),
            g_loss: mean(g_sum, g_steps),
            lifter_loss: mean(l_sum, l_steps),
            d_steps,
            g_steps,
            lifter_steps: l_steps,
            d_max_abs: max_abs(gan.disc.store.values()),
            target_mpjpe: eval.as_ref().map(|e| e.mpjpe),
            target_pa_mpjpe: eval.as_ref().map(|e| e.pa_mpjpe),
        };
        observer(&AdaptEvent::EpochEnd(entry.clone()));
        report.epochs.push(entry);
    }
    Ok(AdaptOutcome { report, wall_clock_secs: start.elapsed().as_secs_f64() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{DiscriminatorConfig, GeneratorConfig};
    use crate::data::{synth_generate, SynthConfig};
    use crate::geometry::{box_extent, project_pose_approx};
    use crate::pipeline::{LifterConfig, PretrainConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(mode: AdaptMode) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            iters_per_epoch: 7,
            warmup_epochs: 1,
            generator_interval: 3,
            batch_size: 8,
            seed: 11,
            mode,
            generator: GeneratorConfig { hidden_dim: 8, noise_dim: 4, ..Default::default() },
            discriminator: DiscriminatorConfig { hidden_dim: 8, ..Default::default() },
            ..Default::default()
        }
    }

    fn data() -> (Dataset, Dataset, Dataset) {
        let s = synth_generate(&SynthConfig::source_default(30, 1)).unwrap().dataset;
        let t = synth_generate(&SynthConfig::target_default(20, 2)).unwrap();
        (s, t.dataset, t.truth.unwrap())
    }

    fn lifter() -> LifterState {
        PretrainConfig {
            lifter: LifterConfig { hidden_dim: 16, block_count: 1, depth_per_block: 2, slope: 0.2 },
            ..Default::default()
        }
        .init_state(16)
        .unwrap()
    }

    #[test]
    fn identity_pair_is_gpa_translated_source() {
        let (s, t, _) = data();
        let skel = SkeletonDef::h36m16();
        let gen = GeneratorNet::new(GeneratorConfig { hidden_dim: 8, noise_dim: 4, ..Default::default() }, &skel, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (src, tar) in s.records.iter().zip(&t.records) {
            let p = build_training_pair(src, tar, Some(&gen), &skel, Placement::Gpa, &mut rng).unwrap();
            let q = build_training_pair(src, tar, None, &skel, Placement::Gpa, &mut rng).unwrap();
            for (a, b) in p.pose_3d.joints.iter().zip(&q.pose_3d.joints) {
                assert!((a - b).norm() < 1e-9);
            }
            let t2 = tar.joints_2d.as_ref().unwrap();
            let root = p.pixels.joints[skel.root_index()];
            assert!((root - t2.joints[skel.root_index()]).norm() <= 1e-9 * root.norm());
            let approx = project_pose_approx(&q.pose_3d, &q.root, &tar.camera).unwrap();
            assert!((box_extent(&approx).sum() - box_extent(t2).sum()).abs() < 1e-9 * box_extent(t2).sum());
        }
    }

    #[test]
    fn warmup_keeps_lifter_and_clip_holds() {
        let (s, t, truth) = data();
        let cfg = TrainConfig { epochs: 1, warmup_epochs: 1, ..tiny(AdaptMode::Full) };
        let mut l = lifter();
        let before = l.net.store.clone();
        let mut gan = GanState::new(&cfg, &s.skeleton).unwrap();
        let mut worst: f64 = 0.0;
        let out = adapt(&mut l, &mut gan, &s, &t, Some(&truth), &cfg, Exec::Parallel, &mut |e| {
            if let AdaptEvent::DiscriminatorStep { max_abs, .. } = e {
                worst = worst.max(*max_abs);
            }
        })
        .unwrap();
        assert_eq!(l.net.store, before);
        assert!(worst > 0.0 && worst <= 0.01);
        let e = &out.report.epochs[0];
        assert_eq!((e.d_steps, e.g_steps, e.lifter_steps), (5, 2, 0));
        assert!(e.target_mpjpe.is_some());
    }

    #[test]
    fn mixed_batches_and_determinism() {
        let (s, t, _) = data();
        for mode in [AdaptMode::Full, AdaptMode::GpaOnly, AdaptMode::LpaOnly, AdaptMode::None] {
            let cfg = tiny(mode);
            let run = |exec| {
                let mut l = lifter();
                let mut gan = GanState::new(&cfg, &s.skeleton).unwrap();
                let mut mixes = Vec::new();
                let out = adapt(&mut l, &mut gan, &s, &t, None, &cfg, exec, &mut |e| {
                    if let AdaptEvent::LifterStep { augmented, original, .. } = e {
                        mixes.push((*augmented, *original));
                    }
                })
                .unwrap();
                (l, gan, out.report, mixes)
            };
            let (l1, g1, r1, m1) = run(Exec::Parallel);
            let (l2, g2, r2, _) = run(Exec::Sequential);
            assert_eq!(l1.net.store, l2.net.store, "{mode:?}");
            assert_eq!(g1.to_checkpoint(), g2.to_checkpoint());
            assert_eq!(r1, r2);
            assert_eq!(m1, vec![(4, 4); 7]);
        }
    }

    #[test]
    fn per_epoch_update_runs_once() {
        let (s, t, _) = data();
        let cfg = TrainConfig { lifter_update: LifterUpdate::PerEpoch, ..tiny(AdaptMode::GpaOnly) };
        let mut l = lifter();
        let mut gan = GanState::new(&cfg, &s.skeleton).unwrap();
        let out = adapt(&mut l, &mut gan, &s, &t, None, &cfg, Exec::Parallel, &mut |_| {}).unwrap();
        assert_eq!(out.report.epochs[1].lifter_steps, 1);
        assert_eq!(out.report.epochs[1].d_steps, 0);
    }

    #[test]
    fn rejects_labelled_target() {
        let (s, _, truth) = data();
        let cfg = tiny(AdaptMode::Full);
        let mut l = lifter();
        let mut gan = GanState::new(&cfg, &s.skeleton).unwrap();
        assert!(matches!(
            adapt(&mut l, &mut gan, &s, &truth, None, &cfg, Exec::Parallel, &mut |_| {}),
            Err(PipelineError::MissingLabels(_))
        ));
    }

    #[test]
    fn gan_checkpoint_roundtrip() {
        let skel = SkeletonDef::h36m16();
        let cfg = tiny(AdaptMode::Full);
        let a = GanState::new(&cfg, &skel).unwrap();
        let mut b = GanState::new(&TrainConfig { seed: 99, ..cfg.clone() }, &skel).unwrap();
        assert_ne!(a.to_checkpoint(), b.to_checkpoint());
        b.load_from(&a.to_checkpoint()).unwrap();
        assert_eq!(a.to_checkpoint(), b.to_checkpoint());
    }
}
