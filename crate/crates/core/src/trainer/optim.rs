//! AdamW with decoupled weight decay and bias-corrected moments.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

impl AdamWConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                v.push(format!("train.optimizer.{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            v.push(format!("train.optimizer.eps must be > 0, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            v.push(format!("train.optimizer.weight_decay must be >= 0, got {}", self.weight_decay));
        }
        v
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor<f32>]) -> Self {
        let zeros = |p: &&Tensor<f32>| Tensor::zeros(p.shape().to_vec());
        Self { m: params.iter().map(zeros).collect(), v: params.iter().map(zeros).collect(), step: 0 }
    }
}

/// One update. `grads[i] = None` leaves parameter `i` (and its moments)
/// untouched. Nothing is modified when any gradient is non-finite.
pub fn adamw_step(
    params: &mut [&mut Tensor<f32>],
    grads: &[Option<Tensor<f32>>],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Parameter(format!("learning rate must be > 0, got {lr}")));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return dim_err("adamw_step", &[params.len()], &[grads.len(), state.m.len()]);
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if let Some(g) = g {
            if g.shape() != p.shape() || state.m[i].shape() != p.shape() {
                return dim_err("adamw_step", p.shape(), g.shape());
            }
            if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at parameter #{i}, element {pos} ({})",
                    g.data()[pos]
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        // moments are stored in f32; the update itself is evaluated in f64
        for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gk = gk as f64;
            let mk = cfg.beta1 * m[k] as f64 + (1.0 - cfg.beta1) * gk;
            let vk = cfg.beta2 * v[k] as f64 + (1.0 - cfg.beta2) * gk * gk;
            m[k] = mk as f32;
            v[k] = vk as f32;
            let update = (mk / bc1) / ((vk / bc2).sqrt() + cfg.eps);
            *w = (*w as f64 * decay - lr * update) as f32;
        }
    }
    Ok(())
}
