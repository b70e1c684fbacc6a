//! Loss-spike detection and run comparison.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::RunRecord;

pub const SPIKE_EMA_DECAY: f64 = 0.99;
pub const SPIKE_THRESHOLD: f64 = 0.1;

/// Counts steps whose loss exceeds the EMA of the preceding losses by more
/// than `threshold` nats. The EMA starts at `loss[0]`. Returns the count
/// and the largest excess (0 when there are no spikes).
pub fn spike_metrics(losses: &[f64], ema_decay: f64, threshold: f64) -> (usize, f64) {
    let Some(&first) = losses.first() else {
        return (0, 0.0);
    };
    let mut ema = first;
    let mut count = 0;
    let mut max = 0.0f64;
    for &l in &losses[1..] {
        let excess = l - ema;
        if excess > threshold {
            count += 1;
            max = max.max(excess);
        }
        ema = ema_decay * ema + (1.0 - ema_decay) * l;
    }
    (count, max)
}

/// Mean of the trailing `max(1, n/20)` losses.
pub fn final_loss(losses: &[f64]) -> Option<f64> {
    if losses.is_empty() {
        return None;
    }
    let k = (losses.len() / 20).max(1);
    let tail = &losses[losses.len() - k..];
    Some(tail.iter().sum::<f64>() / k as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub final_a: Option<f64>,
    pub final_b: Option<f64>,
    /// `b − a`; negative favours `b`.
    pub delta_final: Option<f64>,
    pub spikes_a: usize,
    pub spikes_b: usize,
    pub delta_spikes: i64,
    /// Per-step `loss_b − loss_a`.
    pub diff: Vec<f64>,
}

pub fn compare_runs(a: &RunRecord, b: &RunRecord) -> Result<CompareReport> {
    if a.losses.len() != b.losses.len() {
        return Err(Error::LengthMismatch(a.losses.len(), b.losses.len()));
    }
    let delta_final = match (a.final_loss, b.final_loss) {
        (Some(x), Some(y)) => Some(y - x),
        _ => None,
    };
    Ok(CompareReport {
        final_a: a.final_loss,
        final_b: b.final_loss,
        delta_final,
        spikes_a: a.spike_count,
        spikes_b: b.spike_count,
        delta_spikes: b.spike_count as i64 - a.spike_count as i64,
        diff: a.losses.iter().zip(&b.losses).map(|(x, y)| y - x).collect(),
    })
}
