use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParameterSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WarmupShape {
    #[default]
    Exponential,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub decay_steps: u64,
    #[serde(default)]
    pub warmup_shape: WarmupShape,
}

impl Schedule {
    pub fn constant(lr: f64) -> Self {
        Schedule { peak_lr: lr, min_lr: lr, warmup_steps: 0, decay_steps: 0, warmup_shape: WarmupShape::Linear }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0) || !(self.min_lr >= 0.0) || self.min_lr > self.peak_lr {
            return Err(Error::config(format!(
                "learning rates need 0 <= min_lr ({}) <= peak_lr ({}) and peak_lr > 0",
                self.min_lr, self.peak_lr
            )));
        }
        if self.warmup_shape == WarmupShape::Exponential && self.warmup_steps > 0 && self.min_lr <= 0.0 {
            return Err(Error::config("exponential warmup needs min_lr > 0"));
        }
        Ok(())
    }

    /// Geometric (`min·(peak/min)^(s/w)`) or affine warmup, affine decay to
    /// `min_lr` over `decay_steps`, then constant `min_lr`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let (peak, min) = (self.peak_lr, self.min_lr);
        if step < self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            return match self.warmup_shape {
                WarmupShape::Exponential => min * (peak / min).powf(frac),
                WarmupShape::Linear => min + (peak - min) * frac,
            };
        }
        let into = step - self.warmup_steps;
        if into == 0 {
            return peak;
        }
        if into >= self.decay_steps {
            return min;
        }
        peak - (peak - min) * (into as f64 / self.decay_steps as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 0.1, grad_clip: 1.0 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("Adam epsilon must be positive and weight decay non-negative"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("grad_clip must be positive"));
        }
        Ok(())
    }
}

/// First/second moments and the number of updates applied.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: ParameterSet,
    pub v: ParameterSet,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        AdamState { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    /// Packs both moments into one parameter set for checkpointing.
    pub fn to_params(&self) -> ParameterSet {
        let mut out = ParameterSet::new();
        for (prefix, set) in [("m", &self.m), ("v", &self.v)] {
            for (n, t) in set.iter() {
                out.push(format!("{prefix}:{n}"), t.clone()).expect("unique names");
            }
        }
        out
    }

    pub fn from_params(packed: ParameterSet, t: u64) -> Result<Self> {
        let half = packed.len() / 2;
        let mut m = packed;
        let v_part = m.split_off(half);
        let strip = |set: ParameterSet, prefix: &str| -> Result<ParameterSet> {
            let mut out = ParameterSet::new();
            for (n, t) in set.iter() {
                let name = n
                    .strip_prefix(prefix)
                    .ok_or_else(|| Error::config(format!("optimizer tensor {n} lacks prefix {prefix}")))?;
                out.push(name, t.clone())?;
            }
            Ok(out)
        };
        Ok(AdamState { m: strip(m, "m:")?, v: strip(v_part, "v:")?, t })
    }
}

pub fn global_norm(grads: &ParameterSet) -> f64 {
    grads.tensors().iter().flat_map(|t| t.data.iter()).map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut ParameterSet, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Tensors of rank ≥ 2 receive weight decay; gains and biases do not.
pub fn decay_mask(params: &ParameterSet) -> Vec<bool> {
    params.tensors().iter().map(|t| t.shape.len() >= 2).collect()
}

/// Global-norm clipping, then Adam with bias correction and decoupled weight
/// decay. Tensors with `trainable[i] == false` are left byte-identical and
/// excluded from the clipping norm.
pub fn optimizer_step(
    params: &mut ParameterSet,
    grads: &mut ParameterSet,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
    trainable: Option<&[bool]>,
) -> Result<f64> {
    if !grads.all_finite() {
        return Err(Error::numeric("non-finite gradient", None));
    }
    let n = params.len();
    let train = |i: usize| trainable.is_none_or(|t| t[i]);
    for i in 0..n {
        if !train(i) {
            grads.data_mut(i).fill(0.0);
        }
    }
    let norm = clip_global_norm(grads, cfg.grad_clip);
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let decays = decay_mask(params);
    for i in 0..n {
        if !train(i) {
            continue;
        }
        let wd = if decays[i] { cfg.weight_decay } else { 0.0 };
        let g = grads.data(i);
        let m = state.m.data_mut(i);
        for (mv, gv) in m.iter_mut().zip(g) {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
        }
        let v = state.v.data_mut(i);
        for (vv, gv) in v.iter_mut().zip(g) {
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
        }
        let (m, v) = (state.m.data(i), state.v.data(i));
        let p = params.data_mut(i);
        for k in 0..p.len() {
            let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + cfg.eps);
            p[k] -= lr * update + lr * wd * p[k];
        }
    }
    Ok(norm)
}
