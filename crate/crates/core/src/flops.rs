//! Training-FLOP accounting for one transformer layer.
//!
//! Counts include forward and backward passes; they are exact integers
//! evaluated in 128-bit arithmetic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsInput {
    /// Sequence length.
    pub seq_len: u64,
    /// Model dimension.
    pub d: u64,
    /// Attention heads.
    pub n_heads: u64,
    /// `d_ff / d`
    pub d_ff_ratio: u64,
}

impl FlopsInput {
    pub fn new(seq_len: u64, d: u64, n_heads: u64) -> Self {
        Self {
            seq_len,
            d,
            n_heads,
            d_ff_ratio: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.d == 0 || self.n_heads == 0 || self.d_ff_ratio == 0 {
            return Err(Error::InvalidConfig(
                "FLOPs inputs must be positive integers".into(),
            ));
        }
        Ok(())
    }

    fn wide(&self) -> (u128, u128, u128, u128) {
        (
            self.seq_len as u128,
            self.d as u128,
            self.n_heads as u128,
            self.d_ff_ratio as u128,
        )
    }
}

/// `8 L d² + 4 L² d`: QKV and output projections plus scores and mixing.
pub fn flops_mha(i: &FlopsInput) -> u128 {
    let (l, d, _, _) = i.wide();
    8 * l * d * d + 4 * l * l * d
}

/// `6 L d · d_ff` for an up-gate-down FFN (`18 L d²` at `d_ff = 3d`).
pub fn flops_ffn(i: &FlopsInput) -> u128 {
    let (l, d, _, r) = i.wide();
    6 * l * d * (r * d)
}

/// `6 L d² / n`, identical for the linear and MLP variants. Integer
/// division truncates when `n` does not divide `6 L d²`.
pub fn flops_kha(i: &FlopsInput) -> u128 {
    let (l, d, n, _) = i.wide();
    6 * l * d * d / n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub input: FlopsInput,
    pub mha: u128,
    pub ffn: u128,
    pub total: u128,
    pub kha: u128,
    pub kha_over_total: f64,
    pub kha_over_mha: f64,
}

impl FlopsReport {
    pub fn compute(input: FlopsInput) -> Result<Self> {
        input.validate()?;
        let mha = flops_mha(&input);
        let ffn = flops_ffn(&input);
        let total = mha + ffn;
        let kha = flops_kha(&input);
        Ok(Self {
            input,
            mha,
            ffn,
            total,
            kha,
            kha_over_total: kha as f64 / total as f64,
            kha_over_mha: kha as f64 / mha as f64,
        })
    }

    /// Human-readable report, percentages with two decimals.
    pub fn render(&self) -> String {
        let i = &self.input;
        format!(
            "L={} d={} n={} d_ff_ratio={}\n\
             mha            {}\n\
             ffn            {}\n\
             total          {}\n\
             kha            {}\n\
             kha_over_total {:.2}%\n\
             kha_over_mha   {:.2}%\n",
            i.seq_len,
            i.d,
            i.n_heads,
            i.d_ff_ratio,
            self.mha,
            self.ffn,
            self.total,
            self.kha,
            self.kha_over_total * 100.0,
            self.kha_over_mha * 100.0,
        )
    }
}
