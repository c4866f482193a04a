use serde::{Deserialize, Serialize};

use super::store::ParamStore;
use super::{NnError, Result};

/// RMSProp accumulator and hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsPropState {
    pub second_moment: Vec<f64>,
    pub decay: f64,
    pub epsilon: f64,
    pub lr: f64,
}

impl RmsPropState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self { second_moment: vec![0.0; len], decay: 0.99, epsilon: 1e-8, lr }
    }

    pub fn with_decay(mut self, decay: f64) -> Self {
        self.decay = decay;
        self
    }
}

/// `v <- ρv + (1-ρ)g²; θ <- θ - lr·g/(√v + ε)`, then zeroes the gradients.
pub fn rmsprop_step(params: &mut ParamStore, state: &mut RmsPropState) {
    assert_eq!(state.second_moment.len(), params.len(), "optimizer/store size mismatch");
    let (rho, eps, lr) = (state.decay, state.epsilon, state.lr);
    let (values, grads) = params.split_mut();
    for ((theta, g), v) in values.iter_mut().zip(grads.iter_mut()).zip(&mut state.second_moment) {
        *v = rho * *v + (1.0 - rho) * *g * *g;
        *theta -= lr * *g / (v.sqrt() + eps);
        *g = 0.0;
    }
}

/// Clamps every parameter into `[-c, c]`.
pub fn clip_weights(params: &mut ParamStore, c: f64) -> Result<()> {
    if !(c > 0.0) {
        return Err(NnError::BadClip(c));
    }
    params.values_mut().iter_mut().for_each(|v| *v = v.clamp(-c, c));
    Ok(())
}

pub fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Mean squared error over all entries, with gradient `2(pred - target)/N`.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(NnError::DimMismatch { expected: target.len(), got: pred.len() });
    }
    let n = pred.len() as f64;
    let diff: Vec<f64> = pred.iter().zip(target).map(|(p, t)| p - t).collect();
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff.into_iter().map(|d| 2.0 * d / n).collect()))
}
