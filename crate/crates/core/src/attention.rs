//! Scaled dot-product attention with MHA/GQA/MQA head layouts.
//!
//! Per-head values are kept stacked along rows: head `h` of a batch of `B`
//! sequences of length `L` occupies rows `h·B·L .. (h+1)·B·L`. Key/value
//! tensors hold only the `g` group heads; they are mapped onto query heads
//! when the attention blocks are formed, after every per-head transform.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knocking::{KhaVars, KhaWeights};
use crate::tensor::{Element, Mask, Tape, Tensor, Var};

/// Epsilon inside every RMS normalisation.
pub const RMS_EPS: f64 = 1e-6;

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

/// Order of the per-head transforms between projection and attention.
pub const HEAD_PIPELINE: [&str; 5] = ["project", "knock", "qk_rmsnorm", "rope", "sdpa"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d: usize,
    pub n_heads: usize,
    pub kv_groups: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub causal: bool,
    pub qk_rmsnorm: bool,
    pub rope: bool,
    pub rope_base: f64,
}

impl AttentionConfig {
    /// Causal GQA with `d_k = d_v = d / n_heads`, no QK norm and no RoPE.
    pub fn new(d: usize, n_heads: usize, kv_groups: usize) -> Result<Self> {
        if n_heads == 0 || !d.is_multiple_of(n_heads) {
            return Err(Error::InvalidConfig(format!(
                "model dim {d} is not divisible by {n_heads} heads"
            )));
        }
        let cfg = Self {
            d,
            n_heads,
            kv_groups,
            d_k: d / n_heads,
            d_v: d / n_heads,
            causal: true,
            qk_rmsnorm: false,
            rope: false,
            rope_base: DEFAULT_ROPE_BASE,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn mha(d: usize, n_heads: usize) -> Result<Self> {
        Self::new(d, n_heads, n_heads)
    }

    pub fn mqa(d: usize, n_heads: usize) -> Result<Self> {
        Self::new(d, n_heads, 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.d == 0 || self.n_heads == 0 || self.d_k == 0 || self.d_v == 0 {
            return bad("attention dimensions must be positive".into());
        }
        if self.kv_groups == 0
            || self.kv_groups > self.n_heads
            || !self.n_heads.is_multiple_of(self.kv_groups)
        {
            return bad(format!(
                "kv groups {} must divide {} heads",
                self.kv_groups, self.n_heads
            ));
        }
        if self.rope && !self.d_k.is_multiple_of(2) {
            return bad(format!("rope needs an even head dim, got {}", self.d_k));
        }
        if self.rope_base.is_nan() || self.rope_base <= 0.0 {
            return bad(format!(
                "rope base must be positive, got {}",
                self.rope_base
            ));
        }
        Ok(())
    }

    pub fn heads_per_group(&self) -> usize {
        self.n_heads / self.kv_groups
    }
}

/// Learnable matrices of one attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T> {
    /// `d × n·d_k`, head `i` in columns `i·d_k .. (i+1)·d_k`
    pub w_q: Tensor<T>,
    /// `d × g·d_k`
    pub w_k: Tensor<T>,
    /// `d × g·d_v`
    pub w_v: Tensor<T>,
    /// `n·d_v × d`
    pub w_o: Tensor<T>,
    /// QK-norm gains, shared by all heads of the layer.
    pub q_norm: Option<Tensor<T>>,
    pub k_norm: Option<Tensor<T>>,
}

impl<T: Element> AttentionWeights<T> {
    /// Gaussian projections scaled by `1/sqrt(fan_in)`, unit norm gains.
    pub fn init<R: Rng + ?Sized>(cfg: &AttentionConfig, rng: &mut R) -> Self {
        let s_in = 1.0 / (cfg.d as f64).sqrt();
        let s_out = 1.0 / ((cfg.n_heads * cfg.d_v) as f64).sqrt();
        let mut w = Self {
            w_q: Tensor::randn(vec![cfg.d, cfg.n_heads * cfg.d_k], s_in, rng),
            w_k: Tensor::randn(vec![cfg.d, cfg.kv_groups * cfg.d_k], s_in, rng),
            w_v: Tensor::randn(vec![cfg.d, cfg.kv_groups * cfg.d_v], s_in, rng),
            w_o: Tensor::randn(vec![cfg.n_heads * cfg.d_v, cfg.d], s_out, rng),
            q_norm: None,
            k_norm: None,
        };
        if cfg.qk_rmsnorm {
            w.q_norm = Some(Tensor::ones(vec![cfg.d_k]));
            w.k_norm = Some(Tensor::ones(vec![cfg.d_k]));
        }
        w
    }

    pub fn check(&self, cfg: &AttentionConfig) -> Result<()> {
        let expect = |t: &Tensor<T>, shape: &[usize]| {
            if t.shape() == shape {
                Ok(())
            } else {
                Err(Error::shape("attention weights", t.shape(), shape))
            }
        };
        expect(&self.w_q, &[cfg.d, cfg.n_heads * cfg.d_k])?;
        expect(&self.w_k, &[cfg.d, cfg.kv_groups * cfg.d_k])?;
        expect(&self.w_v, &[cfg.d, cfg.kv_groups * cfg.d_v])?;
        expect(&self.w_o, &[cfg.n_heads * cfg.d_v, cfg.d])?;
        match (&self.q_norm, &self.k_norm, cfg.qk_rmsnorm) {
            (Some(q), Some(k), true) => {
                expect(q, &[cfg.d_k])?;
                expect(k, &[cfg.d_k])
            }
            (None, None, false) => Ok(()),
            _ => Err(Error::InvalidConfig(
                "qk_rmsnorm gains do not match the configuration".into(),
            )),
        }
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out = vec![
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
        ];
        if let (Some(q), Some(k)) = (&self.q_norm, &self.k_norm) {
            out.push(("q_norm", q));
            out.push(("k_norm", k));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut out = vec![
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("w_o", &mut self.w_o),
        ];
        if let (Some(q), Some(k)) = (&mut self.q_norm, &mut self.k_norm) {
            out.push(("q_norm", q));
            out.push(("k_norm", k));
        }
        out
    }

    /// Records the weights as leaves, appending their vars to `order` in
    /// [`Self::named_params`] order.
    pub fn bind(&self, tape: &mut Tape<T>, order: &mut Vec<Var>) -> AttentionVars {
        let mut leaf = |t: &Tensor<T>| {
            let v = tape.leaf(t);
            order.push(v);
            v
        };
        let w_q = leaf(&self.w_q);
        let w_k = leaf(&self.w_k);
        let w_v = leaf(&self.w_v);
        let w_o = leaf(&self.w_o);
        let norms = match (&self.q_norm, &self.k_norm) {
            (Some(q), Some(k)) => Some((leaf(q), leaf(k))),
            _ => None,
        };
        AttentionVars {
            w_q,
            w_k,
            w_v,
            w_o,
            q_norm: norms.map(|n| n.0),
            k_norm: norms.map(|n| n.1),
        }
    }
}

/// Attention weights recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub q_norm: Option<Var>,
    pub k_norm: Option<Var>,
}

/// Per-head projections: `n` query heads and `g` key/value heads.
#[derive(Clone, Debug)]
pub struct HeadProjections {
    pub q: Vec<Var>,
    pub k: Vec<Var>,
    pub v: Vec<Var>,
}

fn split_heads<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    heads: usize,
    dim: usize,
) -> Result<Vec<Var>> {
    let rows = tape.shape(x)[0];
    (0..heads)
        .map(|h| tape.slice(x, 0..rows, h * dim..(h + 1) * dim))
        .collect()
}

/// `Q_i = X W_i^Q` for every query head, `K_j`, `V_j` for every KV group.
pub fn project_qkv<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    w: &AttentionVars,
    cfg: &AttentionConfig,
) -> Result<HeadProjections> {
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[1] != cfg.d {
        return Err(Error::shape("project_qkv", shape, &[0, cfg.d]));
    }
    let q = tape.matmul(x, w.w_q)?;
    let k = tape.matmul(x, w.w_k)?;
    let v = tape.matmul(x, w.w_v)?;
    Ok(HeadProjections {
        q: split_heads(tape, q, cfg.n_heads, cfg.d_k)?,
        k: split_heads(tape, k, cfg.kv_groups, cfg.d_k)?,
        v: split_heads(tape, v, cfg.kv_groups, cfg.d_v)?,
    })
}

/// Row-wise RMS normalisation of a head block with a shared gain.
pub fn qk_rmsnorm<T: Element>(tape: &mut Tape<T>, h: Var, gain: Var) -> Result<Var> {
    tape.rms_norm(h, gain, T::from_f64(RMS_EPS))
}

/// `softmax(Q Kᵀ / sqrt(d_k)) V` for one head of one sequence.
pub fn sdpa<T: Element>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
    let (qs, ks, vs) = (tape.shape(q), tape.shape(k), tape.shape(v));
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(Error::shape("sdpa", qs, ks));
    }
    if qs[0] == 0 || ks[0] == 0 {
        return Err(Error::EmptySequence);
    }
    if qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(Error::shape("sdpa", qs, ks));
    }
    let d_k = qs[1];
    let logits = tape.matmul_nt(q, k)?;
    let logits = tape.scale(logits, T::from_f64(1.0 / (d_k as f64).sqrt()));
    let probs = tape.softmax_rows(logits, causal.then_some(&Mask::Causal))?;
    tape.matmul(probs, v)
}

/// Full attention layer over `x` holding `rows / seq_len` sequences of
/// length `seq_len` stacked along rows.
///
/// Per head: project, knocking projections, QK RMS norm, RoPE, attention.
/// Head outputs are concatenated and projected by `W_O`.
pub fn attention_forward<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    w: &AttentionVars,
    cfg: &AttentionConfig,
    kha: Option<&KhaVars>,
    seq_len: usize,
) -> Result<Var> {
    let rows = tape.shape(x).first().copied().unwrap_or(0);
    if seq_len == 0 || rows == 0 {
        return Err(Error::EmptySequence);
    }
    if rows % seq_len != 0 {
        return Err(Error::shape("attention_forward", tape.shape(x), &[seq_len]));
    }
    let batch = rows / seq_len;

    let heads = project_qkv(tape, x, w, cfg)?;
    let mut q = tape.concat_rows(&heads.q)?;
    let mut k = tape.concat_rows(&heads.k)?;
    let mut v = tape.concat_rows(&heads.v)?;

    if let Some(kha) = kha {
        q = kha.apply_q(tape, q)?;
        k = kha.apply_k(tape, k)?;
        v = kha.apply_v(tape, v)?;
    }
    if cfg.qk_rmsnorm {
        let (gq, gk) = w
            .q_norm
            .zip(w.k_norm)
            .ok_or_else(|| Error::InvalidConfig("qk_rmsnorm enabled without norm gains".into()))?;
        q = qk_rmsnorm(tape, q, gq)?;
        k = qk_rmsnorm(tape, k, gk)?;
    }
    if cfg.rope {
        q = tape.rope(q, seq_len, cfg.rope_base)?;
        k = tape.rope(k, seq_len, cfg.rope_base)?;
    }

    let per_group = cfg.heads_per_group();
    let mut seqs = Vec::with_capacity(batch);
    for b in 0..batch {
        let block = |head: usize| head * rows + b * seq_len..head * rows + (b + 1) * seq_len;
        let mut kv = Vec::with_capacity(cfg.kv_groups);
        for g in 0..cfg.kv_groups {
            let kb = tape.slice(k, block(g), 0..cfg.d_k)?;
            let vb = tape.slice(v, block(g), 0..cfg.d_v)?;
            kv.push((kb, vb));
        }
        let mut outs = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qb = tape.slice(q, block(h), 0..cfg.d_k)?;
            let (kb, vb) = kv[h / per_group];
            outs.push(sdpa(tape, qb, kb, vb, cfg.causal)?);
        }
        seqs.push(tape.concat_cols(&outs)?);
    }
    let concat = tape.concat_rows(&seqs)?;
    tape.matmul(concat, w.w_o)
}

/// Evaluates one attention layer on a single sequence without keeping
/// the tape around.
pub fn attention_eval<T: Element>(
    x: &Tensor<T>,
    w: &AttentionWeights<T>,
    cfg: &AttentionConfig,
    kha: Option<&KhaWeights<T>>,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    w.check(cfg)?;
    let mut tape = Tape::new();
    let mut order = Vec::new();
    let wv = w.bind(&mut tape, &mut order);
    let kv = kha.map(|k| k.bind(&mut tape, &mut order));
    let xv = tape.constant(x);
    let seq_len = x.shape().first().copied().unwrap_or(0);
    let out = attention_forward(&mut tape, xv, &wv, cfg, kv.as_ref(), seq_len)?;
    Ok(tape.tensor(out))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::check_gradients;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    type Heads = Vec<Tensor<f64>>;

    fn eval_projections(
        x: &Tensor<f64>,
        w: &AttentionWeights<f64>,
        cfg: &AttentionConfig,
    ) -> (Heads, Heads, Heads) {
        let mut tape = Tape::new();
        let wv = w.bind(&mut tape, &mut Vec::new());
        let xv = tape.constant(x);
        let p = project_qkv(&mut tape, xv, &wv, cfg).unwrap();
        let get = |vs: &[Var]| vs.iter().map(|&v| tape.tensor(v)).collect::<Vec<_>>();
        (get(&p.q), get(&p.k), get(&p.v))
    }

    #[test]
    fn zero_input_projects_to_zero() {
        let cfg = AttentionConfig::new(8, 4, 2).unwrap();
        let w = AttentionWeights::<f64>::init(&cfg, &mut rng(0));
        let (q, k, v) = eval_projections(&Tensor::zeros(vec![3, 8]), &w, &cfg);
        assert_eq!((q.len(), k.len(), v.len()), (4, 2, 2));
        for t in q.iter().chain(&k).chain(&v) {
            assert!(t.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn identity_query_projection_slices_input_columns() {
        let cfg = AttentionConfig::mha(4, 2).unwrap();
        let mut w = AttentionWeights::<f64>::init(&cfg, &mut rng(1));
        w.w_q = Tensor::eye(4);
        let x = Tensor::randn(vec![3, 4], 1.0, &mut rng(2));
        let (q, _, _) = eval_projections(&x, &w, &cfg);
        for (i, qi) in q.iter().enumerate() {
            for r in 0..3 {
                for c in 0..2 {
                    assert_eq!(qi.at(r, c), x.at(r, 2 * i + c));
                }
            }
        }
    }

    #[test]
    fn projections_match_per_head_loops() {
        let cfg = AttentionConfig::new(6, 3, 3).unwrap();
        let w = AttentionWeights::<f64>::init(&cfg, &mut rng(3));
        let x = Tensor::randn(vec![5, 6], 1.0, &mut rng(4));
        let (q, k, _) = eval_projections(&x, &w, &cfg);
        for (h, (qh, kh)) in q.iter().zip(&k).enumerate() {
            for r in 0..5 {
                for c in 0..2 {
                    let col = h * 2 + c;
                    let wantq: f64 = (0..6).map(|p| x.at(r, p) * w.w_q.at(p, col)).sum();
                    let wantk: f64 = (0..6).map(|p| x.at(r, p) * w.w_k.at(p, col)).sum();
                    assert!((qh.at(r, c) - wantq).abs() < 1e-12);
                    assert!((kh.at(r, c) - wantk).abs() < 1e-12);
                }
            }
        }
    }

    fn norm_eval<T: Element>(h: &Tensor<T>, gain: &Tensor<T>) -> Tensor<T> {
        let mut tape = Tape::new();
        let (hv, gv) = (tape.constant(h), tape.constant(gain));
        let out = qk_rmsnorm(&mut tape, hv, gv).unwrap();
        tape.tensor(out)
    }

    #[test]
    fn rmsnorm_of_ones_is_ones() {
        let out = norm_eval(&Tensor::<f64>::ones(vec![2, 8]), &Tensor::ones(vec![8]));
        for &v in out.data() {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rmsnorm_is_scale_invariant_in_f32() {
        let h = Tensor::<f32>::randn(vec![3, 16], 1.0, &mut rng(5));
        let g = Tensor::<f32>::randn(vec![16], 1.0, &mut rng(6));
        let a = norm_eval(&h, &g);
        let b = norm_eval(&h.scale(37.5), &g);
        assert!(a.max_abs_diff(&b) < 1e-5);
    }

    #[test]
    fn rmsnorm_matches_direct_formula() {
        let h = Tensor::<f64>::randn(vec![4, 6], 1.0, &mut rng(7));
        let g = Tensor::<f64>::randn(vec![6], 1.0, &mut rng(8));
        let out = norm_eval(&h, &g);
        for r in 0..4 {
            let ms: f64 = (0..6).map(|c| h.at(r, c).powi(2)).sum::<f64>() / 6.0;
            for c in 0..6 {
                let want = h.at(r, c) / (ms + 1e-6).sqrt() * g.data()[c];
                assert!((out.at(r, c) - want).abs() < 1e-7);
            }
        }
    }

    fn sdpa_eval(
        q: &Tensor<f64>,
        k: &Tensor<f64>,
        v: &Tensor<f64>,
        causal: bool,
    ) -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v));
        let out = sdpa(&mut tape, qv, kv, vv, causal)?;
        Ok(tape.tensor(out))
    }

    /// Logits, softmax and mixing written out as scalar loops.
    fn sdpa_loops(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, causal: bool) -> Vec<f64> {
        let (l, dk) = q.dims2().unwrap();
        let dv = v.dims2().unwrap().1;
        let mut out = vec![0.0; l * dv];
        for i in 0..l {
            let visible = if causal { i + 1 } else { l };
            let logits: Vec<f64> = (0..visible)
                .map(|j| (0..dk).map(|c| q.at(i, c) * k.at(j, c)).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|x| (x - m).exp()).sum();
            for (j, lg) in logits.iter().enumerate() {
                let p = (lg - m).exp() / z;
                for c in 0..dv {
                    out[i * dv + c] += p * v.at(j, c);
                }
            }
        }
        out
    }

    #[test]
    fn sdpa_single_position_returns_value_row() {
        let mut r = rng(9);
        let (q, k, v) = (
            Tensor::randn(vec![1, 4], 1.0, &mut r),
            Tensor::randn(vec![1, 4], 1.0, &mut r),
            Tensor::randn(vec![1, 3], 1.0, &mut r),
        );
        let out = sdpa_eval(&q, &k, &v, false).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn identical_keys_average_the_values() {
        let mut r = rng(10);
        let q = Tensor::randn(vec![4, 4], 1.0, &mut r);
        let krow = Tensor::<f64>::randn(vec![1, 4], 1.0, &mut r);
        let k = Tensor::from_fn(vec![4, 4], |i| krow.data()[i % 4]);
        let v = Tensor::randn(vec![4, 2], 1.0, &mut r);
        let out = sdpa_eval(&q, &k, &v, false).unwrap();
        for c in 0..2 {
            let mean = (0..4).map(|j| v.at(j, c)).sum::<f64>() / 4.0;
            for i in 0..4 {
                assert!((out.at(i, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sdpa_matches_scalar_loops() {
        let mut r = rng(11);
        let q = Tensor::randn(vec![3, 4], 1.0, &mut r);
        let k = Tensor::randn(vec![3, 4], 1.0, &mut r);
        let v = Tensor::randn(vec![3, 5], 1.0, &mut r);
        for causal in [false, true] {
            let out = sdpa_eval(&q, &k, &v, causal).unwrap();
            let want = sdpa_loops(&q, &k, &v, causal);
            for (a, b) in out.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sdpa_rejects_mismatched_dims() {
        let q = Tensor::<f64>::zeros(vec![2, 4]);
        let k = Tensor::<f64>::zeros(vec![2, 3]);
        let v = Tensor::<f64>::zeros(vec![2, 3]);
        assert!(matches!(
            sdpa_eval(&q, &k, &v, true),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let cfg = AttentionConfig::mha(4, 2).unwrap();
        let w = AttentionWeights::<f64>::init(&cfg, &mut rng(0));
        let mut tape = Tape::new();
        let wv = w.bind(&mut tape, &mut Vec::new());
        let x = tape.constant(&Tensor::zeros(vec![2, 4]));
        assert!(matches!(
            attention_forward(&mut tape, x, &wv, &cfg, None, 0),
            Err(Error::EmptySequence)
        ));
    }

    #[test]
    fn config_validation() {
        assert!(AttentionConfig::new(8, 4, 3).is_err());
        assert!(AttentionConfig::new(8, 3, 1).is_err());
        assert!(AttentionConfig::new(8, 4, 0).is_err());
        let mut cfg = AttentionConfig::new(12, 4, 2).unwrap();
        assert_eq!((cfg.d_k, cfg.d_v, cfg.heads_per_group()), (3, 3, 2));
        cfg.rope = true;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn causal_outputs_depend_only_on_the_past() {
        let mut cfg = AttentionConfig::new(8, 4, 2).unwrap();
        cfg.qk_rmsnorm = true;
        cfg.rope = true;
        let w = AttentionWeights::<f64>::init(&cfg, &mut rng(12));
        let x = Tensor::randn(vec![6, 8], 1.0, &mut rng(13));
        let base = attention_eval(&x, &w, &cfg, None).unwrap();
        for t in 0..6 {
            let mut y = x.clone();
            y.data_mut()[t * 8 + 3] += 0.5;
            let out = attention_eval(&y, &w, &cfg, None).unwrap();
            for r in 0..6 {
                let changed = (0..8).any(|c| out.at(r, c) != base.at(r, c));
                assert_eq!(changed, r >= t, "perturb {t}, row {r}");
            }
        }
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let x = Tensor::<f64>::randn(vec![5, 8], 1.0, &mut rng(14));
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let y = tape.rope(xv, 5, DEFAULT_ROPE_BASE).unwrap();
        let y = tape.tensor(y);
        for r in 0..5 {
            for p in 0..4 {
                let n0 = x.at(r, 2 * p).hypot(x.at(r, 2 * p + 1));
                let n1 = y.at(r, 2 * p).hypot(y.at(r, 2 * p + 1));
                assert!((n0 - n1).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_rows_are_probability_distributions() {
        let mut r = rng(15);
        let q = Tensor::<f64>::randn(vec![5, 4], 3.0, &mut r);
        let k = Tensor::<f64>::randn(vec![5, 4], 3.0, &mut r);
        let mut tape = Tape::new();
        let (qv, kv) = (tape.constant(&q), tape.constant(&k));
        let lg = tape.matmul_nt(qv, kv).unwrap();
        let p = tape.softmax_rows(lg, Some(&Mask::Causal)).unwrap();
        for row in tape.value(p).chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_weights_pass_gradient_check() {
        let mut cfg = AttentionConfig::new(8, 4, 2).unwrap();
        cfg.qk_rmsnorm = true;
        cfg.rope = true;
        let w = AttentionWeights::<f64>::init(&cfg, &mut rng(16));
        let x = Tensor::randn(vec![6, 8], 1.0, &mut rng(17));
        let proj = Tensor::<f64>::randn(vec![6, 8], 1.0, &mut rng(18));
        let mut inputs: Vec<Tensor<f64>> = w
            .named_params()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect();
        // perturb gains away from one so their gradient is generic
        for g in &mut inputs[4..] {
            *g = g.map(|v| v + 0.3);
        }
        let reps = check_gradients(&inputs, 1e-6, |t, v| {
            let wv = AttentionVars {
                w_q: v[0],
                w_k: v[1],
                w_v: v[2],
                w_o: v[3],
                q_norm: Some(v[4]),
                k_norm: Some(v[5]),
            };
            let xv = t.constant(&x);
            let out = attention_forward(t, xv, &wv, &cfg, None, 3)?;
            let pv = t.constant(&proj);
            let p = t.mul(out, pv)?;
            Ok(t.sum(p))
        })
        .unwrap();
        for (rep, (name, _)) in reps.iter().zip(w.named_params()) {
            assert!(rep.max_rel_err < 1e-4, "{name}: {rep:?}");
        }
    }
}
