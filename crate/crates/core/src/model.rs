//! Byte-level decoder-only language model used by the trainer.
//!
//! Pre-norm residual blocks: RMS norm, attention (optionally with knocking
//! projections), RMS norm, SwiGLU feed-forward with `d_ff = 3d`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_forward, AttentionConfig, AttentionVars, AttentionWeights, RMS_EPS,
};
use crate::checkpoint::{Checkpoint, Entry};
use crate::error::{Error, Result};
use crate::knocking::{
    absorb_linear, init_knocking, KhaConfig, KhaInit, KhaKind, KhaVars, KhaWeights, Sites,
};
use crate::tensor::{DType, Element, Tape, Tensor, Var};

pub const BYTE_VOCAB: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub attention: AttentionConfig,
    pub kha: Option<KhaConfig>,
    pub d_ff: usize,
    pub vocab: usize,
}

impl ModelConfig {
    pub fn new(layers: usize, attention: AttentionConfig) -> Self {
        let d_ff = 3 * attention.d;
        Self {
            layers,
            attention,
            kha: None,
            d_ff,
            vocab: BYTE_VOCAB,
        }
    }

    pub fn with_kha(mut self, kha: KhaConfig) -> Self {
        self.kha = Some(kha);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::InvalidConfig(
                "at least one layer is required".into(),
            ));
        }
        if self.d_ff == 0 || self.vocab == 0 {
            return Err(Error::InvalidConfig(
                "d_ff and vocab must be positive".into(),
            ));
        }
        self.attention.validate()?;
        if let Some(k) = &self.kha {
            k.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub attn_norm: Tensor<T>,
    pub attn: AttentionWeights<T>,
    pub kha: Option<KhaWeights<T>>,
    pub ffn_norm: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_down: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLm<T> {
    pub cfg: ModelConfig,
    pub embed: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: Tensor<T>,
    pub unembed: Tensor<T>,
    /// Set once linear knocking matrices have been folded into `W_Q/K/V`.
    pub absorbed: bool,
}

#[derive(Clone, Debug)]
pub struct BlockVars {
    pub attn_norm: Var,
    pub attn: AttentionVars,
    pub kha: Option<KhaVars>,
    pub ffn_norm: Var,
    pub w_up: Var,
    pub w_gate: Var,
    pub w_down: Var,
}

/// Model parameters recorded on a tape; `order` follows
/// [`TransformerLm::named_params`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embed: Var,
    pub blocks: Vec<BlockVars>,
    pub final_norm: Var,
    pub unembed: Var,
    pub order: Vec<Var>,
}

/// Seed of the knocking initialisation for one layer. Independent of the
/// base weights so a KHA model shares every `W` with its baseline.
pub fn knocking_seed(seed: u64, layer: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (0xC0FF_EE00 + layer as u64)
}

impl<T: Element> TransformerLm<T> {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = &cfg.attention;
        let d = a.d;
        let embed = Tensor::randn(vec![cfg.vocab, d], 1.0, &mut rng);
        let mut blocks = Vec::with_capacity(cfg.layers);
        for layer in 0..cfg.layers {
            let attn = AttentionWeights::init(a, &mut rng);
            let w_up = randn_fan_in(vec![d, cfg.d_ff], &mut rng);
            let w_gate = randn_fan_in(vec![d, cfg.d_ff], &mut rng);
            let w_down = randn_fan_in(vec![cfg.d_ff, d], &mut rng);
            let kha = cfg
                .kha
                .as_ref()
                .map(|k| init_knocking(k, a.d_k, a.d_v, knocking_seed(seed, layer)));
            blocks.push(Block {
                attn_norm: Tensor::ones(vec![d]),
                attn,
                kha,
                ffn_norm: Tensor::ones(vec![d]),
                w_up,
                w_gate,
                w_down,
            });
        }
        let unembed = randn_fan_in(vec![d, cfg.vocab], &mut rng);
        let mut model = Self {
            cfg,
            embed,
            blocks,
            final_norm: Tensor::ones(vec![d]),
            unembed,
            absorbed: false,
        };
        model.set_requires_grad(true);
        Ok(model)
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        for (_, p) in self.named_params_mut() {
            p.set_requires_grad(on);
        }
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &b.attn_norm));
            for (n, t) in b.attn.named_params() {
                out.push((format!("layers.{i}.attn.{n}"), t));
            }
            if let Some(k) = &b.kha {
                for (n, t) in k.named_params() {
                    out.push((format!("layers.{i}.attn.kha.{n}"), t));
                }
            }
            out.push((format!("layers.{i}.ffn_norm"), &b.ffn_norm));
            out.push((format!("layers.{i}.ffn.w_up"), &b.w_up));
            out.push((format!("layers.{i}.ffn.w_gate"), &b.w_gate));
            out.push((format!("layers.{i}.ffn.w_down"), &b.w_down));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &mut b.attn_norm));
            for (n, t) in b.attn.named_params_mut() {
                out.push((format!("layers.{i}.attn.{n}"), t));
            }
            if let Some(k) = &mut b.kha {
                for (n, t) in k.named_params_mut() {
                    out.push((format!("layers.{i}.attn.kha.{n}"), t));
                }
            }
            out.push((format!("layers.{i}.ffn_norm"), &mut b.ffn_norm));
            out.push((format!("layers.{i}.ffn.w_up"), &mut b.w_up));
            out.push((format!("layers.{i}.ffn.w_gate"), &mut b.w_gate));
            out.push((format!("layers.{i}.ffn.w_down"), &mut b.w_down));
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out.push(("unembed".to_string(), &mut self.unembed));
        out
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> ModelVars {
        let mut order = Vec::new();
        let leaf = |tape: &mut Tape<T>, order: &mut Vec<Var>, t: &Tensor<T>| {
            let v = tape.leaf(t);
            order.push(v);
            v
        };
        let embed = leaf(tape, &mut order, &self.embed);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let attn_norm = leaf(tape, &mut order, &b.attn_norm);
            let attn = b.attn.bind(tape, &mut order);
            let kha = b.kha.as_ref().map(|k| k.bind(tape, &mut order));
            let ffn_norm = leaf(tape, &mut order, &b.ffn_norm);
            let w_up = leaf(tape, &mut order, &b.w_up);
            let w_gate = leaf(tape, &mut order, &b.w_gate);
            let w_down = leaf(tape, &mut order, &b.w_down);
            blocks.push(BlockVars {
                attn_norm,
                attn,
                kha,
                ffn_norm,
                w_up,
                w_gate,
                w_down,
            });
        }
        let final_norm = leaf(tape, &mut order, &self.final_norm);
        let unembed = leaf(tape, &mut order, &self.unembed);
        ModelVars {
            embed,
            blocks,
            final_norm,
            unembed,
            order,
        }
    }

    /// Next-token logits, `tokens.len() × vocab`, for sequences of
    /// `seq_len` tokens laid end to end.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        tokens: &[usize],
        seq_len: usize,
    ) -> Result<Var> {
        let eps = T::from_f64(RMS_EPS);
        let mut x = tape.embedding(vars.embed, tokens)?;
        for b in &vars.blocks {
            let h = tape.rms_norm(x, b.attn_norm, eps)?;
            let a = attention_forward(
                tape,
                h,
                &b.attn,
                &self.cfg.attention,
                b.kha.as_ref(),
                seq_len,
            )?;
            x = tape.add(x, a)?;
            let h = tape.rms_norm(x, b.ffn_norm, eps)?;
            let up = tape.matmul(h, b.w_up)?;
            let gate = tape.matmul(h, b.w_gate)?;
            let act = tape.silu(gate)?;
            let hidden = tape.mul(act, up)?;
            let f = tape.matmul(hidden, b.w_down)?;
            x = tape.add(x, f)?;
        }
        let h = tape.rms_norm(x, vars.final_norm, eps)?;
        tape.matmul(h, vars.unembed)
    }

    /// Mean next-token cross-entropy in nats.
    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        inputs: &[usize],
        targets: &[usize],
        seq_len: usize,
    ) -> Result<Var> {
        let logits = self.forward(tape, vars, inputs, seq_len)?;
        tape.cross_entropy(logits, targets)
    }

    /// Forward pass without gradients.
    pub fn logits(&self, tokens: &[usize], seq_len: usize) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind_constants(&mut tape);
        let out = self.forward(&mut tape, &vars, tokens, seq_len)?;
        Ok(tape.tensor(out))
    }

    fn bind_constants(&self, tape: &mut Tape<T>) -> ModelVars {
        let mut frozen = self.clone();
        frozen.set_requires_grad(false);
        frozen.bind(tape)
    }

    /// Adds the tape's leaf gradients into each parameter's accumulator.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, vars: &ModelVars) {
        for ((_, p), &v) in self.named_params_mut().into_iter().zip(&vars.order) {
            if let Some(g) = tape.grad(v) {
                p.accumulate_grad(g);
            }
        }
    }

    /// Copy with linear knocking matrices folded into the projections and
    /// removed.
    pub fn absorb(&self) -> Result<Self> {
        match self.cfg.kha.map(|k| k.kind) {
            Some(KhaKind::Linear) => {}
            Some(kind) => {
                return Err(Error::Unsupported(format!(
                    "{} knocking projections are not absorbable",
                    kind.to_string().to_uppercase()
                )))
            }
            None => {
                return Err(Error::Unsupported(
                    "model has no knocking projections to absorb".into(),
                ))
            }
        }
        let mut out = self.clone();
        for b in &mut out.blocks {
            if let Some(k) = b.kha.take() {
                b.attn = absorb_linear(&b.attn, &k, &self.cfg.attention)?;
            }
        }
        out.cfg.kha = None;
        out.absorbed = true;
        out.set_requires_grad(self.embed.requires_grad());
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        let a = &self.cfg.attention;
        let kha = self.cfg.kha.as_ref();
        let meta = [
            ("meta.layers", self.cfg.layers as f64),
            ("meta.d", a.d as f64),
            ("meta.n_heads", a.n_heads as f64),
            ("meta.kv_groups", a.kv_groups as f64),
            ("meta.d_k", a.d_k as f64),
            ("meta.d_v", a.d_v as f64),
            ("meta.causal", a.causal as u8 as f64),
            ("meta.qk_rmsnorm", a.qk_rmsnorm as u8 as f64),
            ("meta.rope", a.rope as u8 as f64),
            ("meta.rope_base", a.rope_base),
            ("meta.d_ff", self.cfg.d_ff as f64),
            ("meta.vocab", self.cfg.vocab as f64),
            ("meta.kha_kind", kha.map_or(0.0, |k| k.kind.code() as f64)),
            ("meta.kha_sites", kha.map_or(0.0, |k| k.sites.bits() as f64)),
            ("meta.absorbed", self.absorbed as u8 as f64),
        ];
        for (name, v) in meta {
            c.push(Entry::scalar_f64(name, v));
        }
        for (name, t) in self.named_params() {
            c.push(Entry::from_tensor(name, t));
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let cfg = config_from_checkpoint(c)?;
        let mut model = Self::init(cfg, 0)?;
        model.absorbed = c.scalar("meta.absorbed")? != 0.0;
        for (name, p) in model.named_params_mut() {
            let t = c.require(&name)?.to_tensor::<T>()?;
            if t.shape() != p.shape() {
                return Err(Error::shape("checkpoint tensor", t.shape(), p.shape()));
            }
            p.data_mut().copy_from_slice(t.data());
        }
        model.zero_grad();
        Ok(model)
    }
}

fn randn_fan_in<T: Element, R: Rng + ?Sized>(shape: Vec<usize>, rng: &mut R) -> Tensor<T> {
    let std = 1.0 / (shape[0] as f64).sqrt();
    Tensor::randn(shape, std, rng)
}

/// Rebuilds the model configuration stored in checkpoint metadata.
pub fn config_from_checkpoint(c: &Checkpoint) -> Result<ModelConfig> {
    let int = |name: &str| -> Result<usize> {
        let v = c.scalar(name)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Checkpoint(format!("`{name}` is not a count: {v}")));
        }
        Ok(v as usize)
    };
    let flag = |name: &str| -> Result<bool> { Ok(c.scalar(name)? != 0.0) };
    let attention = AttentionConfig {
        d: int("meta.d")?,
        n_heads: int("meta.n_heads")?,
        kv_groups: int("meta.kv_groups")?,
        d_k: int("meta.d_k")?,
        d_v: int("meta.d_v")?,
        causal: flag("meta.causal")?,
        qk_rmsnorm: flag("meta.qk_rmsnorm")?,
        rope: flag("meta.rope")?,
        rope_base: c.scalar("meta.rope_base")?,
    };
    let kind_code = int("meta.kha_kind")?;
    let kha = if kind_code == 0 {
        None
    } else {
        let kind = KhaKind::from_code(kind_code as u8)
            .ok_or_else(|| Error::Checkpoint(format!("unknown knocking kind code {kind_code}")))?;
        Some(KhaConfig {
            kind,
            sites: Sites::from_bits(int("meta.kha_sites")? as u8),
            init: KhaInit::Diagonal,
            random_std: None,
        })
    };
    let cfg = ModelConfig {
        layers: int("meta.layers")?,
        attention,
        kha,
        d_ff: int("meta.d_ff")?,
        vocab: int("meta.vocab")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Element type of the parameters in a checkpoint.
pub fn checkpoint_dtype(c: &Checkpoint) -> Result<DType> {
    Ok(c.require("embed")?.data.dtype())
}

/// A model of either element type, as loaded from disk.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel {
    F32(TransformerLm<f32>),
    F64(TransformerLm<f64>),
}

impl AnyModel {
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        match checkpoint_dtype(c)? {
            DType::F32 => Ok(AnyModel::F32(TransformerLm::from_checkpoint(c)?)),
            DType::F64 => Ok(AnyModel::F64(TransformerLm::from_checkpoint(c)?)),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        match self {
            AnyModel::F32(m) => m.to_checkpoint(),
            AnyModel::F64(m) => m.to_checkpoint(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyModel::F32(m) => &m.cfg,
            AnyModel::F64(m) => &m.cfg,
        }
    }

    pub fn absorb(&self) -> Result<Self> {
        Ok(match self {
            AnyModel::F32(m) => AnyModel::F32(m.absorb()?),
            AnyModel::F64(m) => AnyModel::F64(m.absorb()?),
        })
    }
}
