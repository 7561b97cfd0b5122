use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::encoder::{EncoderState, ParamTensor};
use super::tensor::Tensor;
use crate::error::{invalid, shape_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_iters: usize,
    pub batch_size: usize,
    /// EMA coefficient of the teacher.
    pub momentum: f64,
    /// InfoNCE temperature.
    pub temperature: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub queue_capacity: usize,
    /// Softmax temperature of the distillation term.
    pub kl_temperature: f64,
    /// Feed degraded crops to the student. When off, both encoders see the
    /// clean batch.
    pub degrade: bool,
    /// Consecutive non-finite steps tolerated before training aborts.
    pub max_nonfinite_streak: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 3e-4,
            lr_min: 0.0,
            total_iters: 200_000,
            batch_size: 32,
            momentum: 0.999,
            temperature: 0.07,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            queue_capacity: 1024,
            kl_temperature: 1.0,
            degrade: true,
            max_nonfinite_streak: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(invalid!("momentum must lie in [0, 1], got {}", self.momentum));
        }
        if !(self.temperature > 0.0) || !(self.kl_temperature > 0.0) {
            return Err(invalid!("temperatures must be positive"));
        }
        if !(self.lr_max >= 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return Err(invalid!("need 0 <= lr_min <= lr_max, got {} and {}", self.lr_min, self.lr_max));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid!("Adam betas must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) || !(self.adam_eps > 0.0) {
            return Err(invalid!("weight_decay must be >= 0 and adam_eps > 0"));
        }
        if self.total_iters == 0 || self.batch_size == 0 || self.queue_capacity == 0 {
            return Err(invalid!("total_iters, batch_size and queue_capacity must be positive"));
        }
        Ok(())
    }
}

/// Cosine annealing from `lr_max` at `t = 0` to `lr_min` at `t = total_iters`.
pub fn cosine_lr(t: usize, config: &TrainConfig) -> Result<f64> {
    if t > config.total_iters {
        return Err(invalid!("step {t} beyond schedule length {}", config.total_iters));
    }
    let frac = t as f64 / config.total_iters as f64;
    Ok(config.lr_min + 0.5 * (config.lr_max - config.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// First and second moment estimates, one pair per trainable tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// Decoupled-weight-decay Adam. Decay is applied first, `θ ← θ − lr·wd·θ`,
/// followed by the bias-corrected adaptive step. Only tensors present in
/// `grads` are touched.
pub fn adamw_step(
    state: &mut EncoderState,
    grads: &BTreeMap<String, Tensor>,
    opt: &mut AdamState,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = state
            .get(name)
            .ok_or_else(|| shape_err!("gradient for unknown parameter {name}"))?;
        if p.shape != g.shape() {
            return Err(shape_err!("{name}: parameter {:?} vs gradient {:?}", p.shape, g.shape()));
        }
    }
    opt.step += 1;
    let t = opt.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (name, g) in grads {
        let p: &mut ParamTensor = state.get_mut(name).expect("checked above");
        let m = opt.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = opt.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for (((w, &gi), mi), vi) in p.data.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let mut theta = f64::from(*w);
            theta -= lr * config.weight_decay * theta;
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            theta -= lr * m_hat / (v_hat.sqrt() + config.adam_eps);
            *w = theta as f32;
        }
    }
    Ok(())
}
