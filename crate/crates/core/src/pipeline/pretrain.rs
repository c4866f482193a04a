use serde::{Deserialize, Serialize};

use super::lifter::{lifter_input, lifter_step, LifterConfig, LifterState};
use super::{batch_indices, derive_rng, tags, NanDump, PipelineError, Result};
use crate::data::Dataset;
use crate::nn::max_abs;
use crate::par::Exec;
use crate::skeleton::Pose3D;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    /// Training stops before this epoch index.
    pub epochs: usize,
    /// First epoch index; non-zero when resuming.
    pub start_epoch: usize,
    /// Defaults to one pass over the source set per epoch.
    pub iters_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub lifter: LifterConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            start_epoch: 0,
            iters_per_epoch: None,
            batch_size: 64,
            lr: 1e-4,
            seed: 0,
            lifter: LifterConfig::default(),
        }
    }
}

impl PretrainConfig {
    /// Freshly initialized lifter for this config.
    pub fn init_state(&self, joints: usize) -> Result<LifterState> {
        LifterState::new(self.lifter, joints, self.lr, &mut derive_rng(self.seed, tags::INIT_LIFTER, 0, 0))
    }

    pub fn iterations(&self, source_len: usize) -> usize {
        self.iters_per_epoch.unwrap_or_else(|| source_len.div_ceil(self.batch_size))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainStep {
    pub epoch: usize,
    pub iteration: usize,
    /// Batch MSE in mm².
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: Vec<PretrainStep>,
}

/// Source inputs and targets, failing if any record lacks 2D or 3D.
pub(crate) fn supervised_pairs(source: &Dataset) -> Result<(Vec<Vec<f64>>, Vec<Pose3D>)> {
    if source.is_empty() {
        return Err(crate::data::DataError::EmptyDataset.into());
    }
    let mut inputs = Vec::with_capacity(source.len());
    let mut targets = Vec::with_capacity(source.len());
    for r in &source.records {
        match (&r.joints_2d, &r.joints_3d) {
            (Some(p2), Some(p3)) => {
                inputs.push(lifter_input(p2, &r.camera));
                targets.push(p3.clone());
            }
            _ => return Err(PipelineError::MissingLabels(format!("source record {} needs joints_2d and joints_3d", r.id))),
        }
    }
    Ok((inputs, targets))
}

/// Supervised training on source 2D/3D pairs for epochs
/// `start_epoch..epochs`. Batches come from the same sampler the adaptation
/// loop uses, so resumed runs and `none`-mode adaptation line up exactly.
pub fn pretrain(
    state: &mut LifterState,
    source: &Dataset,
    cfg: &PretrainConfig,
    exec: Exec,
    observer: &mut dyn FnMut(&PretrainStep),
) -> Result<PretrainReport> {
    if cfg.batch_size < 1 || !(cfg.lr > 0.0) {
        return Err(PipelineError::BadConfig("batch_size and lr must be positive".into()));
    }
    let (inputs, targets) = supervised_pairs(source)?;
    state.opt.lr = cfg.lr;
    let iters = cfg.iterations(source.len());
    let mut report = PretrainReport::default();
    for epoch in cfg.start_epoch..cfg.epochs {
        for it in 0..iters {
            let idx = batch_indices(source.len(), cfg.batch_size, cfg.seed, epoch as u64, it as u64);
            let x: Vec<Vec<f64>> = idx.iter().map(|&i| inputs[i].clone()).collect();
            let y: Vec<Pose3D> = idx.iter().map(|&i| targets[i].clone()).collect();
            let loss = lifter_step(state, &x, &y, exec)?;
            if !loss.is_finite() || !state.net.store.values().iter().all(|v| v.is_finite()) {
                return Err(PipelineError::NanDetected(Box::new(NanDump {
                    stage: "pretrain".into(),
                    epoch,
                    iteration: it,
                    loss,
                    lifter_max_abs: max_abs(state.net.store.values()),
                    generator_max_abs: None,
                    discriminator_max_abs: None,
                })));
            }
            let step = PretrainStep { epoch, iteration: it, loss };
            observer(&step);
            report.steps.push(step);
        }
    }
    Ok(report)
}
