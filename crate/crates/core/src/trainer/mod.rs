//! Deterministic byte-level language-model training.

mod data;
mod metrics;
mod optim;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use data::{data_seed, Batcher};
pub use metrics::{
    compare_runs, final_loss, spike_metrics, CompareReport, SPIKE_EMA_DECAY, SPIKE_THRESHOLD,
};
pub use optim::{
    adamw_step, global_norm, grad_clip_global, AdamConfig, AdamState, DecayMode, ParamMut,
};

use crate::error::{Error, Result};
use crate::model::{AnyModel, ModelConfig, TransformerLm};
use crate::tensor::{DType, Element, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_mode: DecayMode,
    pub grad_clip: f64,
    pub warmup_frac: f64,
    pub final_lr_frac: f64,
    pub steps: usize,
    pub batch_tokens: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub elem_type: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 3e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            decay_mode: DecayMode::Decoupled,
            grad_clip: 1.0,
            warmup_frac: 0.05,
            final_lr_frac: 0.10,
            steps: 2000,
            batch_tokens: 256,
            seq_len: 64,
            seed: 0,
            elem_type: DType::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return bad("warmup_frac must lie in (0, 1)");
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return bad("grad_clip must be positive");
        }
        if !(self.lr_peak.is_finite() && self.lr_peak > 0.0) {
            return bad("lr_peak must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.seq_len == 0 || self.batch_tokens < self.seq_len {
            return bad("need seq_len > 0 and batch_tokens >= seq_len");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            decay_mode: self.decay_mode,
        }
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_frac * self.steps as f64).round() as usize
    }
}

/// Learning rate at `step`: linear warmup from 0 to `lr_peak`, then cosine
/// decay reaching `final_lr_frac · lr_peak` at `steps − 1`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let w = cfg.warmup_steps();
    let peak = cfg.lr_peak;
    let last = peak * cfg.final_lr_frac;
    if step < w {
        return peak * step as f64 / w as f64;
    }
    let span = cfg.steps.saturating_sub(1).saturating_sub(w);
    if span == 0 {
        return if step == w && cfg.steps > w + 1 {
            peak
        } else {
            last
        };
    }
    let p = ((step - w) as f64 / span as f64).min(1.0);
    last + (peak - last) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    /// Mean next-byte cross-entropy per step, nats/token.
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    /// Global gradient norm before clipping.
    pub grad_norms: Vec<f64>,
    pub spike_count: usize,
    pub spike_max: f64,
    /// Mean of the trailing `max(1, steps/20)` losses.
    pub final_loss: Option<f64>,
    pub elapsed_secs: f64,
}

impl RunRecord {
    pub fn from_series(
        seed: u64,
        losses: Vec<f64>,
        lrs: Vec<f64>,
        grad_norms: Vec<f64>,
        elapsed_secs: f64,
    ) -> Self {
        let (spike_count, spike_max) = spike_metrics(&losses, SPIKE_EMA_DECAY, SPIKE_THRESHOLD);
        Self {
            seed,
            final_loss: final_loss(&losses),
            losses,
            lrs,
            grad_norms,
            spike_count,
            spike_max,
            elapsed_secs,
        }
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    /// `step,loss,lr,grad_norm` with a header row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,lr,grad_norm\n");
        for (i, ((l, lr), g)) in self
            .losses
            .iter()
            .zip(&self.lrs)
            .zip(&self.grad_norms)
            .enumerate()
        {
            s.push_str(&format!("{i},{l},{lr},{g}\n"));
        }
        s
    }
}

/// Per-step progress passed to observers.
#[derive(Clone, Copy, Debug)]
pub struct StepLog {
    pub step: usize,
    pub steps: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub struct TrainOutput<T> {
    pub record: RunRecord,
    pub model: TransformerLm<T>,
}

pub fn train_run<T: Element>(
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    corpus: &[u8],
) -> Result<TrainOutput<T>> {
    train_run_observed(mcfg, tcfg, corpus, &mut |_| {})
}

/// Trains from scratch, calling `observer` after every step.
pub fn train_run_observed<T: Element>(
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    corpus: &[u8],
    observer: &mut dyn FnMut(&StepLog),
) -> Result<TrainOutput<T>> {
    tcfg.validate()?;
    mcfg.validate()?;
    if let Some(b) = corpus.iter().find(|&&b| b as usize >= mcfg.vocab) {
        return Err(Error::InvalidConfig(format!(
            "corpus byte {b} is outside the vocabulary of {}",
            mcfg.vocab
        )));
    }
    let started = Instant::now();
    let mut model = TransformerLm::<T>::init(mcfg.clone(), tcfg.seed)?;
    let mut batches = Batcher::new(corpus, tcfg.seq_len, tcfg.batch_tokens, tcfg.seed)?;
    let adam = tcfg.adam();
    let mut state = AdamState::new();
    let decay: Vec<bool> = model
        .named_params()
        .iter()
        .map(|(_, t)| t.rank() >= 2)
        .collect();

    let mut losses = Vec::with_capacity(tcfg.steps);
    let mut lrs = Vec::with_capacity(tcfg.steps);
    let mut norms = Vec::with_capacity(tcfg.steps);
    for step in 0..tcfg.steps {
        let (inputs, targets) = batches.next_batch();
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let loss_var = model.loss(&mut tape, &vars, &inputs, &targets, tcfg.seq_len)?;
        let loss = tape.value(loss_var)[0].as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                last_finite: losses.last().copied(),
            });
        }
        tape.backward(loss_var)?;
        let mut grads: Vec<Vec<f64>> = model
            .named_params()
            .iter()
            .zip(&vars.order)
            .map(|((_, p), &v)| match tape.grad(v) {
                Some(g) => g.iter().map(|x| x.as_f64()).collect(),
                None => vec![0.0; p.numel()],
            })
            .collect();
        drop(tape);
        let norm = grad_clip_global(&mut grads, tcfg.grad_clip);
        let lr = lr_at(step, tcfg);
        let mut named = model.named_params_mut();
        let mut params: Vec<ParamMut<'_, T>> = named
            .iter_mut()
            .zip(&decay)
            .map(|((name, value), &decay)| ParamMut {
                name: name.as_str(),
                value: &mut **value,
                decay,
            })
            .collect();
        adamw_step(&mut params, &grads, &mut state, lr, &adam)?;

        losses.push(loss);
        lrs.push(lr);
        norms.push(norm);
        observer(&StepLog {
            step,
            steps: tcfg.steps,
            loss,
            lr,
            grad_norm: norm,
        });
    }
    let record = RunRecord::from_series(
        tcfg.seed,
        losses,
        lrs,
        norms,
        started.elapsed().as_secs_f64(),
    );
    Ok(TrainOutput { record, model })
}

/// [`train_run_observed`] dispatched on `tcfg.elem_type`.
pub fn train_any(
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    corpus: &[u8],
    observer: &mut dyn FnMut(&StepLog),
) -> Result<(RunRecord, AnyModel)> {
    Ok(match tcfg.elem_type {
        DType::F32 => {
            let o = train_run_observed::<f32>(mcfg, tcfg, corpus, observer)?;
            (o.record, AnyModel::F32(o.model))
        }
        DType::F64 => {
            let o = train_run_observed::<f64>(mcfg, tcfg, corpus, observer)?;
            (o.record, AnyModel::F64(o.model))
        }
    })
}

#[cfg(test)]
mod tests;
