//! Minimal dense-network substrate for the fixed architectures used here:
//! residual LeakyReLU MLPs, hand-written reverse-mode gradients, RMSProp,
//! WGAN weight clipping, MSE and a binary checkpoint format.

mod checkpoint;
mod mlp;
mod optim;
mod store;

pub use checkpoint::{Checkpoint, CheckpointSlice};
pub use mlp::{leaky_relu, Mlp, NetworkSpec, Tape};
pub use optim::{clip_weights, max_abs, mse_loss, rmsprop_step, RmsPropState};
pub use store::{ParamSlice, ParamStore};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("tape does not match this network")]
    TapeMismatch,
    #[error("clip constant must be positive, got {0}")]
    BadClip(f64),
    #[error("invalid network spec: {0}")]
    BadSpec(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("checkpoint has no slice named {0}")]
    MissingSlice(String),
}

pub type Result<T> = std::result::Result<T, NnError>;
