//! Training hyperparameters, Adam, the EMA shadow and the learning-rate
//! schedule.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Real;
use crate::train::patch::PatchPlan;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Multiplier applied to the learning rate once per epoch.
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub ema_alpha: f64,
    pub lambda_dice: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub patch: Option<PatchPlan>,
    pub seed: u64,
    /// Stop once validation Dice reaches this value.
    pub target_dice: Option<f64>,
    /// Validate every this many epochs (and after the last one).
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1.6e-3,
            lr_decay: 0.9992,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            ema_alpha: 0.99,
            lambda_dice: 1.0,
            batch_size: 3,
            epochs: 200,
            batches_per_epoch: 200,
            patch: None,
            seed: 0,
            target_dice: None,
            validate_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(invalid(what.to_string()));
        if !(0.0..=2.0).contains(&self.lambda_dice) {
            return bad("lambda_dice must lie in [0, 2]");
        }
        if !(0.0..1.0).contains(&self.ema_alpha) {
            return bad("ema_alpha must lie in [0, 1)");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be a finite non-negative number");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.adam_eps <= 0.0 {
            return bad("adam_eps must be positive");
        }
        if self.batch_size == 0 || self.batches_per_epoch == 0 || self.validate_every == 0 {
            return bad("batch_size, batches_per_epoch and validate_every must be positive");
        }
        Ok(())
    }

    /// `lr0 * lr_decay^epoch`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi(epoch as i32)
    }
}

/// Adam moments, step counter, learning rate and the EMA shadow.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Real = f32> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
    pub lr: f64,
    pub shadow: Vec<T>,
}

impl<T: Real> OptimizerState<T> {
    /// Zero moments and a shadow equal to `params`.
    pub fn new(params: &[T], lr: f64) -> Self {
        Self {
            m: vec![T::ZERO; params.len()],
            v: vec![T::ZERO; params.len()],
            step: 0,
            lr,
            shadow: params.to_vec(),
        }
    }

    /// Multiplies the learning rate by the per-epoch decay.
    pub fn end_epoch(&mut self, cfg: &TrainConfig) {
        self.lr *= cfg.lr_decay;
    }
}

/// One bias-corrected Adam step. Non-finite gradients abort before any
/// state is touched.
pub fn adam_update<T: Real>(state: &mut OptimizerState<T>, params: &mut [T], grads: &[T], cfg: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(invalid(format!(
            "{} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient of parameter {i} is {:?} at optimizer step {}",
            grads[i],
            state.step + 1
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let c1 = T::from_f64(1.0 - cfg.beta1.powi(t));
    let c2 = T::from_f64(1.0 - cfg.beta2.powi(t));
    let lr = T::from_f64(state.lr);
    let eps = T::from_f64(cfg.adam_eps);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (T::ONE - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::ONE - b2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// `shadow <- alpha * shadow + (1 - alpha) * params`.
pub fn ema_update<T: Real>(shadow: &mut [T], params: &[T], alpha: f64) {
    let a = T::from_f64(alpha);
    let b = T::from_f64(1.0 - alpha);
    for (s, &p) in shadow.iter_mut().zip(params) {
        *s = a * *s + b * p;
    }
}
