//! AdamW with linear warmup.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            base_lr: 1e-4,
            warmup_steps: 1000,
            weight_decay: 1e-4,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl AdamConfig {
    /// Learning rate applied on update number `step` (1-based): linear
    /// ramp to `base_lr` over `warmup_steps`, constant afterwards.
    pub fn lr_at(&self, step: u64) -> f64 {
        let warm = self.warmup_steps.max(1) as f64;
        self.base_lr * (step as f64 / warm).min(1.0)
    }
}

/// Optimizer state: first and second moments per parameter, in store order.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Result<Self> {
        if config.warmup_steps == 0 {
            return Err(TensorError::Parameter { op: "adam", detail: "warmup_steps must be positive".into() });
        }
        let zeros = || store.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect::<Vec<_>>();
        Ok(AdamState { config, step: 0, m: zeros(), v: zeros() })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Total number of tracked moment entries (equal to the parameter count).
    pub fn tracked_len(&self) -> usize {
        self.m.iter().map(Vec::len).sum()
    }

    /// Learning rate the next update will use.
    pub fn next_lr(&self) -> f64 {
        self.config.lr_at(self.step + 1)
    }
}

/// One AdamW update with decoupled weight decay. Gradients are zeroed
/// afterwards.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, opt: &mut AdamState<T>) -> Result<()> {
    if store.len() != opt.m.len() {
        return Err(TensorError::Contract(format!(
            "optimizer tracks {} parameters, store has {}",
            opt.m.len(),
            store.len()
        )));
    }
    for (i, (name, t)) in store.iter().enumerate() {
        match t.grad() {
            None => return Err(TensorError::Contract(format!("parameter `{name}` has no gradient"))),
            Some(g) if g.len() != opt.m[i].len() => {
                return Err(TensorError::Contract(format!("moment size mismatch for `{name}`")))
            }
            _ => {}
        }
    }
    opt.step += 1;
    let c = &opt.config;
    let lr = T::from_f64(c.lr_at(opt.step));
    let b1 = T::from_f64(c.beta1);
    let b2 = T::from_f64(c.beta2);
    let eps = T::from_f64(c.eps);
    let decay = T::from_f64(c.weight_decay);
    let bc1 = T::from_f64(1.0 - c.beta1.powi(opt.step.min(i32::MAX as u64) as i32));
    let bc2 = T::from_f64(1.0 - c.beta2.powi(opt.step.min(i32::MAX as u64) as i32));
    for (i, (_, t)) in store.iter_mut().enumerate() {
        let (values, grad) = t.values_and_grad_mut();
        let grad = grad.expect("checked above");
        let m = &mut opt.m[i];
        let v = &mut opt.v[i];
        for j in 0..values.len() {
            let g = grad[j];
            m[j] = b1 * m[j] + (T::one() - b1) * g;
            v[j] = b2 * v[j] + (T::one() - b2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            values[j] -= lr * (m_hat / (v_hat.sqrt() + eps) + decay * values[j]);
            grad[j] = T::zero();
        }
    }
    Ok(())
}
