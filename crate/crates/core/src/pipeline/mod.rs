//! Supervised pretraining of the lifting network and the adversarial
//! adaptation loop (position alignment, pose augmentation, warmup, mixing).

mod adapt;
mod alignment;
mod lifter;
mod pretrain;

pub use adapt::{
    adapt, build_training_pair, build_training_pair_with, AdaptEvent, AdaptOutcome, AdaptReport, EpochReport,
    GanState, NanDump, Placement, TrainingPair,
};
pub use alignment::{alignment_study, AlignmentStudy, QuantityStats, HISTOGRAM_BINS, QUANTITIES, SETS};
pub use lifter::{
    evaluate_lifter, lifter_input, lifter_step, predict_dataset, LifterConfig, LifterMeta, LifterNet, LifterState,
};
pub use pretrain::{pretrain, PretrainConfig, PretrainReport, PretrainStep};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{AugBounds, AugmentError, DiscriminatorConfig, GeneratorConfig};
use crate::data::{DataError, Pairing};
use crate::geometry::GeometryError;
use crate::metrics::MetricsError;
use crate::nn::NnError;
use crate::skeleton::SkeletonError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing labels: {0}")]
    MissingLabels(String),
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("non-finite value during {}: epoch {} iteration {}", .0.stage, .0.epoch, .0.iteration)]
    NanDetected(Box<NanDump>),
    #[error("no ground truth for target record {0}")]
    MissingTruth(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Which of the two alignment components are active during adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptMode {
    /// Adversarial augmentation followed by position alignment.
    Full,
    /// Identity augmentation; position alignment only.
    GpaOnly,
    /// Adversarial augmentation placed at a fixed canonical root.
    LpaOnly,
    /// Neither: continued supervised training on source pairs.
    None,
}

impl AdaptMode {
    pub fn uses_generator(self) -> bool {
        matches!(self, AdaptMode::Full | AdaptMode::LpaOnly)
    }
}

/// When the lifter is updated after warmup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LifterUpdate {
    /// One mixed batch per iteration.
    PerIteration,
    /// One mixed batch at the end of each epoch.
    PerEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub warmup_epochs: usize,
    /// Every `generator_interval`-th iteration is a generator step; the rest
    /// are critic steps.
    pub generator_interval: usize,
    pub batch_size: usize,
    /// Augmented : original samples in each lifter batch.
    pub mix_ratio: [usize; 2],
    pub lr_lifter: f64,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub clip: f64,
    pub seed: u64,
    pub bounds: AugBounds,
    pub mode: AdaptMode,
    /// Root depth (mm) used in place of position alignment in `lpa-only` mode.
    pub canonical_depth: f64,
    pub lifter_update: LifterUpdate,
    /// How paired targets are drawn each epoch.
    pub pairing: Pairing,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    /// PCK threshold (mm) for per-epoch target evaluation.
    pub pck_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            iters_per_epoch: 200,
            warmup_epochs: 5,
            generator_interval: 6,
            batch_size: 64,
            mix_ratio: [1, 1],
            lr_lifter: 1e-4,
            lr_generator: 1e-4,
            lr_discriminator: 1e-4,
            clip: 0.01,
            seed: 0,
            bounds: AugBounds::default(),
            mode: AdaptMode::Full,
            canonical_depth: 5000.0,
            lifter_update: LifterUpdate::PerIteration,
            pairing: Pairing::Permutation,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            pck_threshold: crate::metrics::DEFAULT_PCK_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::BadConfig(m));
        if self.generator_interval < 2 {
            return bad(format!("generator_interval must be >= 2, got {}", self.generator_interval));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.iters_per_epoch == 0 {
            return bad("iters_per_epoch must be positive".into());
        }
        if self.mix_ratio[0] + self.mix_ratio[1] == 0 {
            return bad("mix_ratio must have a positive entry".into());
        }
        for (name, v) in [("lr_lifter", self.lr_lifter), ("lr_generator", self.lr_generator), ("lr_discriminator", self.lr_discriminator)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.clip > 0.0) {
            return bad(format!("clip must be positive, got {}", self.clip));
        }
        if !(self.canonical_depth > 0.0 && self.canonical_depth.is_finite()) {
            return bad(format!("canonical_depth must be positive, got {}", self.canonical_depth));
        }
        if !(self.pck_threshold > 0.0) {
            return bad(format!("pck_threshold must be positive, got {}", self.pck_threshold));
        }
        self.bounds.validate()?;
        Ok(())
    }

    /// Augmented and original sample counts in a lifter batch.
    pub fn mix_counts(&self) -> (usize, usize) {
        let [a, o] = self.mix_ratio;
        let b = self.batch_size;
        let aug = (b * a).div_ceil(a + o);
        (aug, b - aug)
    }

    /// Generator config with this config's bounds applied.
    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig { bounds: self.bounds, ..self.generator }
    }
}

/// Hex SHA-256 of the JSON serialization of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serialization is infallible");
    Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) mod tags {
    pub const ORDER: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const INIT_LIFTER: u64 = 3;
    pub const INIT_GENERATOR: u64 = 4;
    pub const INIT_DISCRIMINATOR: u64 = 5;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for each `(seed, purpose, epoch, iteration)`.
pub fn derive_rng(seed: u64, tag: u64, epoch: u64, iteration: u64) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for v in [tag, epoch, iteration] {
        h = splitmix(h ^ v);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Source indices of one batch: consecutive windows over an epoch-specific
/// permutation, wrapping around when the epoch needs more samples than exist.
pub fn batch_indices(n: usize, batch: usize, seed: u64, epoch: u64, iteration: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(seed, tags::ORDER, epoch, 0));
    let start = iteration as usize * batch;
    (0..batch).map(|k| order[(start + k) % n]).collect()
}
