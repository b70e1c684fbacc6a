//! AdamW with bias correction and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayMode {
    /// `p -= lr·wd·p`, separate from the adaptive update.
    #[default]
    Decoupled,
    /// `wd·p` added to the gradient before the moments are updated.
    Coupled,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_mode: DecayMode,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            decay_mode: DecayMode::Decoupled,
        }
    }
}

/// First and second moments per parameter plus the update counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One parameter handed to [`adamw_step`].
pub struct ParamMut<'a, T> {
    pub name: &'a str,
    pub value: &'a mut Tensor<T>,
    /// Whether weight decay applies.
    pub decay: bool,
}

/// Applies one AdamW update. Every gradient is checked before any
/// parameter is touched, so a non-finite gradient leaves params and state
/// unchanged.
pub fn adamw_step<T: Element>(
    params: &mut [ParamMut<'_, T>],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::LengthMismatch(params.len(), grads.len()));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.numel() != g.len() {
            return Err(Error::shape("adamw_step", p.value.shape(), &[g.len()]));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGrad {
                name: p.name.to_string(),
            });
        }
    }
    if state.m.is_empty() {
        state.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != grads.len() {
        return Err(Error::LengthMismatch(state.m.len(), grads.len()));
    }

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let wd = if p.decay { cfg.weight_decay } else { 0.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, x) in p.value.data_mut().iter_mut().enumerate() {
            let mut w = x.as_f64();
            let mut gj = g[j];
            if cfg.decay_mode == DecayMode::Coupled {
                gj += wd * w;
            }
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            if cfg.decay_mode == DecayMode::Decoupled {
                w -= lr * wd * w;
            }
            w -= lr * mhat / (vhat.sqrt() + cfg.eps);
            *x = T::from_f64(w);
        }
    }
    Ok(())
}

/// Global L2 norm across all gradients.
pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn grad_clip_global(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for x in grads.iter_mut().flat_map(|g| g.iter_mut()) {
            *x *= s;
        }
    }
    norm
}
