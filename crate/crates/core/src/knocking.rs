//! Knocking-heads projections.
//!
//! A knocking projection is a single matrix (or small gated MLP) shared by
//! every head of a layer and applied to each head's query, key or value
//! block before attention. With diagonal initialisation the whole block is
//! exactly the identity map at step 0, so a fresh KHA model computes the
//! same function as its baseline.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionWeights};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KhaKind {
    /// `H T` with a square shared `T`.
    Linear,
    /// `2 (H W_up ⊙ σ(H W_gate)) W_down`
    Mlp,
    /// `2 (H ⊙ σ(H W_gate))`, the gate-only ablation.
    Gate,
}

impl KhaKind {
    pub fn code(self) -> u8 {
        match self {
            KhaKind::Linear => 1,
            KhaKind::Mlp => 2,
            KhaKind::Gate => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(KhaKind::Linear),
            2 => Some(KhaKind::Mlp),
            3 => Some(KhaKind::Gate),
            _ => None,
        }
    }

    fn matrices(self) -> usize {
        match self {
            KhaKind::Linear | KhaKind::Gate => 1,
            KhaKind::Mlp => 3,
        }
    }
}

impl FromStr for KhaKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(KhaKind::Linear),
            "mlp" => Ok(KhaKind::Mlp),
            "gate" => Ok(KhaKind::Gate),
            other => Err(format!("unknown knocking kind `{other}`")),
        }
    }
}

impl fmt::Display for KhaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KhaKind::Linear => "linear",
            KhaKind::Mlp => "mlp",
            KhaKind::Gate => "gate",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Site {
    Q,
    K,
    V,
}

impl Site {
    pub const ALL: [Site; 3] = [Site::Q, Site::K, Site::V];

    pub fn letter(self) -> char {
        match self {
            Site::Q => 'q',
            Site::K => 'k',
            Site::V => 'v',
        }
    }
}

/// Subset of `{Q, K, V}`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sites {
    pub q: bool,
    pub k: bool,
    pub v: bool,
}

impl Sites {
    pub const QKV: Sites = Sites {
        q: true,
        k: true,
        v: true,
    };
    pub const V: Sites = Sites {
        q: false,
        k: false,
        v: true,
    };

    pub fn contains(self, site: Site) -> bool {
        match site {
            Site::Q => self.q,
            Site::K => self.k,
            Site::V => self.v,
        }
    }

    pub fn is_empty(self) -> bool {
        !(self.q || self.k || self.v)
    }

    pub fn iter(self) -> impl Iterator<Item = Site> {
        Site::ALL.into_iter().filter(move |&s| self.contains(s))
    }

    pub fn bits(self) -> u8 {
        self.q as u8 | (self.k as u8) << 1 | (self.v as u8) << 2
    }

    pub fn from_bits(bits: u8) -> Self {
        Sites {
            q: bits & 1 != 0,
            k: bits & 2 != 0,
            v: bits & 4 != 0,
        }
    }
}

impl FromStr for Sites {
    type Err = String;

    /// Parses strings such as `"qkv"` or `"v"`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let mut sites = Sites::default();
        for ch in s.chars() {
            let slot = match ch.to_ascii_lowercase() {
                'q' => &mut sites.q,
                'k' => &mut sites.k,
                'v' => &mut sites.v,
                other => return Err(format!("unknown site `{other}` in `{s}`")),
            };
            if *slot {
                return Err(format!("site `{ch}` repeated in `{s}`"));
            }
            *slot = true;
        }
        if sites.is_empty() {
            return Err("no knocking sites given".into());
        }
        Ok(sites)
    }
}

impl fmt::Display for Sites {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in self.iter() {
            write!(f, "{}", s.letter())?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KhaInit {
    /// Identity for `T`, `W_up` and `W_down`, zero for `W_gate`.
    Diagonal,
    /// Independent Gaussian entries for every matrix.
    Random,
}

impl FromStr for KhaInit {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "diagonal" => Ok(KhaInit::Diagonal),
            "random" => Ok(KhaInit::Random),
            other => Err(format!("unknown init `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KhaConfig {
    pub kind: KhaKind,
    pub sites: Sites,
    pub init: KhaInit,
    /// Standard deviation for random init; `1/sqrt(d_k)` when unset.
    pub random_std: Option<f64>,
}

impl KhaConfig {
    pub fn linear(sites: Sites) -> Self {
        Self {
            kind: KhaKind::Linear,
            sites,
            init: KhaInit::Diagonal,
            random_std: None,
        }
    }

    /// MLP on values.
    pub fn mlp() -> Self {
        Self {
            kind: KhaKind::Mlp,
            ..Self::linear(Sites::V)
        }
    }

    /// Gate-only on values.
    pub fn gate() -> Self {
        Self {
            kind: KhaKind::Gate,
            ..Self::linear(Sites::V)
        }
    }

    /// Overrides the sites, including Q/K for the MLP and gate kinds.
    pub fn with_sites(mut self, sites: Sites) -> Self {
        self.sites = sites;
        self
    }

    pub fn with_random_init(mut self, std: Option<f64>) -> Self {
        self.init = KhaInit::Random;
        self.random_std = std;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.sites.is_empty() {
            return Err(Error::InvalidConfig(
                "knocking sites must be nonempty".into(),
            ));
        }
        if let Some(s) = self.random_std {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "random_std must be positive, got {s}"
                )));
            }
        }
        Ok(())
    }
}

/// Number of learnable scalars the knocking projections add to one layer.
pub fn param_count(cfg: &KhaConfig, d_k: usize, d_v: usize) -> usize {
    cfg.sites
        .iter()
        .map(|s| {
            let dim = if s == Site::V { d_v } else { d_k };
            cfg.kind.matrices() * dim * dim
        })
        .sum()
}

/// Shared projection for one site.
#[derive(Clone, Debug, PartialEq)]
pub enum SiteWeights<T> {
    Linear {
        t: Tensor<T>,
    },
    Mlp {
        up: Tensor<T>,
        gate: Tensor<T>,
        down: Tensor<T>,
    },
    Gate {
        gate: Tensor<T>,
    },
}

impl<T: Element> SiteWeights<T> {
    pub fn kind(&self) -> KhaKind {
        match self {
            SiteWeights::Linear { .. } => KhaKind::Linear,
            SiteWeights::Mlp { .. } => KhaKind::Mlp,
            SiteWeights::Gate { .. } => KhaKind::Gate,
        }
    }

    fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            SiteWeights::Linear { t } => vec![("t", t)],
            SiteWeights::Mlp { up, gate, down } => vec![("up", up), ("gate", gate), ("down", down)],
            SiteWeights::Gate { gate } => vec![("gate", gate)],
        }
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        match self {
            SiteWeights::Linear { t } => vec![("t", t)],
            SiteWeights::Mlp { up, gate, down } => vec![("up", up), ("gate", gate), ("down", down)],
            SiteWeights::Gate { gate } => vec![("gate", gate)],
        }
    }
}

/// One layer's knocking projections: at most one per site, shared by
/// every head at that site.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KhaWeights<T> {
    pub q: Option<SiteWeights<T>>,
    pub k: Option<SiteWeights<T>>,
    pub v: Option<SiteWeights<T>>,
}

impl<T: Element> KhaWeights<T> {
    pub fn site(&self, site: Site) -> Option<&SiteWeights<T>> {
        match site {
            Site::Q => self.q.as_ref(),
            Site::K => self.k.as_ref(),
            Site::V => self.v.as_ref(),
        }
    }

    fn site_mut(&mut self, site: Site) -> &mut Option<SiteWeights<T>> {
        match site {
            Site::Q => &mut self.q,
            Site::K => &mut self.k,
            Site::V => &mut self.v,
        }
    }

    pub fn sites(&self) -> Sites {
        Sites {
            q: self.q.is_some(),
            k: self.k.is_some(),
            v: self.v.is_some(),
        }
    }

    /// The kind shared by all present sites, if any site is present.
    pub fn kind(&self) -> Option<KhaKind> {
        Site::ALL
            .iter()
            .find_map(|&s| self.site(s).map(SiteWeights::kind))
    }

    /// Parameters named `<site>.<matrix>`, e.g. `v.up`.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        Site::ALL
            .iter()
            .filter_map(|&s| self.site(s).map(|w| (s, w)))
            .flat_map(|(s, w)| {
                w.named()
                    .into_iter()
                    .map(move |(n, t)| (format!("{}.{n}", s.letter()), t))
            })
            .collect()
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (s, slot) in [
            (Site::Q, &mut self.q),
            (Site::K, &mut self.k),
            (Site::V, &mut self.v),
        ] {
            if let Some(w) = slot {
                for (n, t) in w.named_mut() {
                    out.push((format!("{}.{n}", s.letter()), t));
                }
            }
        }
        out
    }

    /// Records the matrices as leaves in [`Self::named_params`] order.
    pub fn bind(&self, tape: &mut Tape<T>, order: &mut Vec<Var>) -> KhaVars {
        let mut bind_site = |w: &Option<SiteWeights<T>>| {
            w.as_ref().map(|w| {
                let mut leaf = |t: &Tensor<T>| {
                    let v = tape.leaf(t);
                    order.push(v);
                    v
                };
                match w {
                    SiteWeights::Linear { t } => SiteVars::Linear(leaf(t)),
                    SiteWeights::Mlp { up, gate, down } => SiteVars::Mlp {
                        up: leaf(up),
                        gate: leaf(gate),
                        down: leaf(down),
                    },
                    SiteWeights::Gate { gate } => SiteVars::Gate(leaf(gate)),
                }
            })
        };
        KhaVars {
            q: bind_site(&self.q),
            k: bind_site(&self.k),
            v: bind_site(&self.v),
        }
    }

    pub fn check(&self, cfg: &AttentionConfig) -> Result<()> {
        for site in Site::ALL {
            let dim = if site == Site::V { cfg.d_v } else { cfg.d_k };
            if let Some(w) = self.site(site) {
                for (_, t) in w.named() {
                    if t.shape() != [dim, dim] {
                        return Err(Error::shape("knocking weights", t.shape(), &[dim, dim]));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Seeds the generator used for random knocking initialisation.
pub fn knocking_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Builds the shared matrices for every configured site.
pub fn init_knocking<T: Element>(
    cfg: &KhaConfig,
    d_k: usize,
    d_v: usize,
    seed: u64,
) -> KhaWeights<T> {
    let mut rng = knocking_rng(seed);
    let std = cfg.random_std.unwrap_or(1.0 / (d_k as f64).sqrt());
    let mut out = KhaWeights {
        q: None,
        k: None,
        v: None,
    };
    for site in cfg.sites.iter() {
        let dim = if site == Site::V { d_v } else { d_k };
        let mut mat = |diag: bool| match cfg.init {
            KhaInit::Diagonal if diag => Tensor::eye(dim),
            KhaInit::Diagonal => Tensor::zeros(vec![dim, dim]),
            KhaInit::Random => Tensor::randn(vec![dim, dim], std, &mut rng),
        };
        let w = match cfg.kind {
            KhaKind::Linear => SiteWeights::Linear { t: mat(true) },
            KhaKind::Mlp => SiteWeights::Mlp {
                up: mat(true),
                gate: mat(false),
                down: mat(true),
            },
            KhaKind::Gate => SiteWeights::Gate { gate: mat(false) },
        };
        *out.site_mut(site) = Some(w);
    }
    out
}

/// Site projection recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub enum SiteVars {
    Linear(Var),
    Mlp { up: Var, gate: Var, down: Var },
    Gate(Var),
}

#[derive(Clone, Copy, Debug)]
pub struct KhaVars {
    pub q: Option<SiteVars>,
    pub k: Option<SiteVars>,
    pub v: Option<SiteVars>,
}

impl KhaVars {
    fn apply<T: Element>(site: Option<SiteVars>, tape: &mut Tape<T>, h: Var) -> Result<Var> {
        match site {
            None => Ok(h),
            Some(SiteVars::Linear(t)) => kha_linear_apply(tape, h, t),
            Some(SiteVars::Mlp { up, gate, down }) => kha_mlp_apply(tape, h, up, gate, down),
            Some(SiteVars::Gate(gate)) => kha_gate_apply(tape, h, gate),
        }
    }

    pub fn apply_q<T: Element>(&self, tape: &mut Tape<T>, h: Var) -> Result<Var> {
        Self::apply(self.q, tape, h)
    }

    pub fn apply_k<T: Element>(&self, tape: &mut Tape<T>, h: Var) -> Result<Var> {
        Self::apply(self.k, tape, h)
    }

    pub fn apply_v<T: Element>(&self, tape: &mut Tape<T>, h: Var) -> Result<Var> {
        Self::apply(self.v, tape, h)
    }
}

fn check_square<T: Element>(tape: &Tape<T>, h: Var, m: Var, op: &'static str) -> Result<()> {
    let (hs, ms) = (tape.shape(h), tape.shape(m));
    match (hs, ms) {
        ([_, c], [r, c2]) if r == c && c2 == c => Ok(()),
        _ => Err(Error::shape(op, hs, ms)),
    }
}

/// `H T` for a head block (or several heads stacked along rows).
pub fn kha_linear_apply<T: Element>(tape: &mut Tape<T>, h: Var, t: Var) -> Result<Var> {
    check_square(tape, h, t, "kha_linear_apply")?;
    tape.matmul(h, t)
}

/// `2 (H W_up ⊙ σ(H W_gate)) W_down`, no biases.
pub fn kha_mlp_apply<T: Element>(
    tape: &mut Tape<T>,
    h: Var,
    up: Var,
    gate: Var,
    down: Var,
) -> Result<Var> {
    for m in [up, gate, down] {
        check_square(tape, h, m, "kha_mlp_apply")?;
    }
    let a = tape.matmul(h, up)?;
    let g = tape.matmul(h, gate)?;
    let s = tape.sigmoid(g);
    let prod = tape.mul(a, s)?;
    let twice = tape.scale(prod, T::from_f64(2.0));
    tape.matmul(twice, down)
}

/// `2 (H ⊙ σ(H W_gate))`
pub fn kha_gate_apply<T: Element>(tape: &mut Tape<T>, h: Var, gate: Var) -> Result<Var> {
    check_square(tape, h, gate, "kha_gate_apply")?;
    let g = tape.matmul(h, gate)?;
    let s = tape.sigmoid(g);
    let prod = tape.mul(h, s)?;
    Ok(tape.scale(prod, T::from_f64(2.0)))
}

/// Right-multiplies each `dim`-wide head block of `w` by `t`.
fn fold_heads<T: Element>(w: &Tensor<T>, t: &Tensor<T>, dim: usize) -> Result<Tensor<T>> {
    let (rows, cols) = w.dims2()?;
    if t.shape() != [dim, dim] || cols % dim != 0 {
        return Err(Error::shape("absorb", w.shape(), t.shape()));
    }
    let mut out = w.clone();
    for h in 0..cols / dim {
        let block = Tensor::from_fn(vec![rows, dim], |i| {
            w.data()[(i / dim) * cols + h * dim + i % dim]
        });
        let folded = block.matmul(t)?;
        for r in 0..rows {
            out.data_mut()[r * cols + h * dim..r * cols + (h + 1) * dim]
                .copy_from_slice(&folded.data()[r * dim..(r + 1) * dim]);
        }
    }
    Ok(out)
}

/// Folds linear knocking matrices into the head projections:
/// `W_i' = W_i T` for every head slice of each configured site.
pub fn absorb_linear<T: Element>(
    w: &AttentionWeights<T>,
    kha: &KhaWeights<T>,
    cfg: &AttentionConfig,
) -> Result<AttentionWeights<T>> {
    let mut out = w.clone();
    for site in Site::ALL {
        let Some(sw) = kha.site(site) else { continue };
        let SiteWeights::Linear { t } = sw else {
            return Err(Error::Unsupported(format!(
                "{} knocking projections are not absorbable",
                sw.kind().to_string().to_uppercase()
            )));
        };
        match site {
            Site::Q => out.w_q = fold_heads(&w.w_q, t, cfg.d_k)?,
            Site::K => out.w_k = fold_heads(&w.w_k, t, cfg.d_k)?,
            Site::V => out.w_v = fold_heads(&w.w_v, t, cfg.d_v)?,
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{attention_eval, AttentionConfig};
    use crate::gradcheck::check_gradients;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn mlp_eval(
        v: &Tensor<f64>,
        up: &Tensor<f64>,
        gate: &Tensor<f64>,
        down: &Tensor<f64>,
    ) -> Tensor<f64> {
        let mut t = Tape::new();
        let (h, u, g, d) = (
            t.constant(v),
            t.constant(up),
            t.constant(gate),
            t.constant(down),
        );
        let out = kha_mlp_apply(&mut t, h, u, g, d).unwrap();
        t.tensor(out)
    }

    fn gate_eval(v: &Tensor<f64>, gate: &Tensor<f64>) -> Tensor<f64> {
        let mut t = Tape::new();
        let (h, g) = (t.constant(v), t.constant(gate));
        let out = kha_gate_apply(&mut t, h, g).unwrap();
        t.tensor(out)
    }

    fn linear_eval(h: &Tensor<f64>, m: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut t = Tape::new();
        let (a, b) = (t.constant(h), t.constant(m));
        let out = kha_linear_apply(&mut t, a, b)?;
        Ok(t.tensor(out))
    }

    #[test]
    fn diagonal_init_is_identity() {
        let lin = init_knocking::<f64>(&KhaConfig::linear(Sites::QKV), 4, 6, 0);
        let Some(SiteWeights::Linear { t }) = &lin.v else {
            panic!()
        };
        assert_eq!(t, &Tensor::eye(6));
        let Some(SiteWeights::Linear { t }) = &lin.q else {
            panic!()
        };
        assert_eq!(t, &Tensor::eye(4));

        let mlp = init_knocking::<f64>(&KhaConfig::mlp(), 4, 4, 0);
        assert!(mlp.q.is_none() && mlp.k.is_none());
        let Some(SiteWeights::Mlp { up, gate, down }) = &mlp.v else {
            panic!()
        };
        assert_eq!((up, down), (&Tensor::eye(4), &Tensor::eye(4)));
        assert!(gate.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn diagonal_mlp_is_exact_identity() {
        let v = Tensor::<f64>::randn(vec![5, 4], 3.0, &mut rng(1));
        let out = mlp_eval(
            &v,
            &Tensor::eye(4),
            &Tensor::zeros(vec![4, 4]),
            &Tensor::eye(4),
        );
        assert_eq!(out, v);

        let v32 = v.cast::<f32>();
        let mut t = Tape::new();
        let h = t.constant(&v32);
        let (u, g, d) = (
            t.constant(&Tensor::eye(4)),
            t.constant(&Tensor::zeros(vec![4, 4])),
            t.constant(&Tensor::eye(4)),
        );
        let o = kha_mlp_apply(&mut t, h, u, g, d).unwrap();
        assert!(t.tensor(o).max_abs_diff(&v32) < 1e-6);
    }

    #[test]
    fn saturated_gate_doubles_values() {
        let v = Tensor::<f64>::from_rows(&[[0.5, 1.0, 2.0]]);
        // every row of V has a positive sum, so V·G is large and positive
        let out = mlp_eval(
            &v,
            &Tensor::eye(3),
            &Tensor::full(vec![3, 3], 1e4),
            &Tensor::eye(3),
        );
        assert!(out.max_abs_diff(&v.scale(2.0)) < 1e-12);
    }

    #[test]
    fn mlp_matches_scalar_loops() {
        let mut r = rng(2);
        let v = Tensor::<f64>::randn(vec![2, 3], 1.0, &mut r);
        let up = Tensor::randn(vec![3, 3], 1.0, &mut r);
        let gate = Tensor::randn(vec![3, 3], 1.0, &mut r);
        let down = Tensor::randn(vec![3, 3], 1.0, &mut r);
        let out = mlp_eval(&v, &up, &gate, &down);
        for i in 0..2 {
            let mut hidden = [0.0; 3];
            for (j, hj) in hidden.iter_mut().enumerate() {
                let a: f64 = (0..3).map(|p| v.at(i, p) * up.at(p, j)).sum();
                let g: f64 = (0..3).map(|p| v.at(i, p) * gate.at(p, j)).sum();
                *hj = 2.0 * a / (1.0 + (-g).exp());
            }
            for c in 0..3 {
                let want: f64 = (0..3).map(|j| hidden[j] * down.at(j, c)).sum();
                assert!((out.at(i, c) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gate_examples() {
        let mut r = rng(3);
        let v = Tensor::<f64>::randn(vec![3, 4], 1.0, &mut r);
        assert_eq!(gate_eval(&v, &Tensor::zeros(vec![4, 4])), v);
        let g = Tensor::randn(vec![4, 4], 1.0, &mut r);
        assert!(gate_eval(&Tensor::zeros(vec![3, 4]), &g)
            .data()
            .iter()
            .all(|&x| x == 0.0));

        let out = gate_eval(&v, &g);
        for i in 0..3 {
            for c in 0..4 {
                let z: f64 = (0..4).map(|p| v.at(i, p) * g.at(p, c)).sum();
                let want = 2.0 * v.at(i, c) / (1.0 + (-z).exp());
                assert!((out.at(i, c) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn linear_apply_examples() {
        let mut r = rng(4);
        let h = Tensor::<f64>::randn(vec![3, 4], 1.0, &mut r);
        assert_eq!(linear_eval(&h, &Tensor::eye(4)).unwrap(), h);
        assert!(linear_eval(&h, &Tensor::zeros(vec![4, 4]))
            .unwrap()
            .data()
            .iter()
            .all(|&x| x == 0.0));
        assert!(linear_eval(&h, &Tensor::eye(3)).is_err());

        // per-head application equals one product on the stacked block
        let h2 = Tensor::<f64>::randn(vec![3, 4], 1.0, &mut r);
        let t = Tensor::randn(vec![4, 4], 1.0, &mut r);
        let stacked = Tensor::new(vec![6, 4], [h.data(), h2.data()].concat()).unwrap();
        let both = linear_eval(&stacked, &t).unwrap();
        let (a, b) = (linear_eval(&h, &t).unwrap(), linear_eval(&h2, &t).unwrap());
        assert_eq!(both.data(), [a.data(), b.data()].concat().as_slice());
    }

    #[test]
    fn random_init_is_reproducible() {
        let cfg = KhaConfig::mlp().with_random_init(None);
        let a = init_knocking::<f32>(&cfg, 16, 16, 7);
        let b = init_knocking::<f32>(&cfg, 16, 16, 7);
        let c = init_knocking::<f32>(&cfg, 16, 16, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bits = |w: &KhaWeights<f32>| {
            w.named_params()
                .iter()
                .flat_map(|(_, t)| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
        // default std is 1/sqrt(d_k)
        let all: Vec<f64> = a
            .named_params()
            .iter()
            .flat_map(|(_, t)| t.data().iter().map(|&x| x as f64).collect::<Vec<_>>())
            .collect();
        let var = all.iter().map(|x| x * x).sum::<f64>() / all.len() as f64;
        assert!((var.sqrt() - 0.25).abs() < 0.02, "{}", var.sqrt());
    }

    #[test]
    fn param_count_examples() {
        let linear = KhaConfig::linear(Sites::QKV);
        assert_eq!(param_count(&linear, 16, 16), 768);
        assert_eq!(param_count(&KhaConfig::mlp(), 16, 16), 768);
        assert_eq!(param_count(&KhaConfig::gate(), 16, 16), 256);
        assert_eq!(param_count(&KhaConfig::linear(Sites::V), 128, 128), 16384);
        assert_eq!(param_count(&linear, 8, 4), 2 * 64 + 16);
    }

    #[test]
    fn sites_parse_and_print() {
        assert_eq!("qkv".parse::<Sites>().unwrap(), Sites::QKV);
        assert_eq!("v".parse::<Sites>().unwrap(), Sites::V);
        assert_eq!("kq".parse::<Sites>().unwrap().to_string(), "qk");
        assert!("".parse::<Sites>().is_err());
        assert!("vv".parse::<Sites>().is_err());
        assert!("x".parse::<Sites>().is_err());
        for b in 1..8u8 {
            assert_eq!(Sites::from_bits(b).bits(), b);
        }
    }

    #[test]
    fn empty_sites_rejected() {
        assert!(KhaConfig::linear(Sites::default()).validate().is_err());
    }

    #[test]
    fn absorbing_mlp_is_unsupported() {
        let cfg = AttentionConfig::new(8, 2, 2).unwrap();
        let w = AttentionWeights::<f64>::init(&cfg, &mut rng(5));
        let kha = init_knocking(&KhaConfig::mlp(), 4, 4, 0);
        let err = absorb_linear(&w, &kha, &cfg).unwrap_err();
        assert_eq!(
            err.to_string(),
            "unsupported: MLP knocking projections are not absorbable"
        );
    }

    #[test]
    fn absorbing_identity_is_exact() {
        let cfg = AttentionConfig::new(8, 4, 2).unwrap();
        let w = AttentionWeights::<f32>::init(&cfg, &mut rng(6));
        let kha = init_knocking(&KhaConfig::linear(Sites::QKV), 2, 2, 0);
        let once = absorb_linear(&w, &kha, &cfg).unwrap();
        assert_eq!(once, w);
        assert_eq!(absorb_linear(&once, &kha, &cfg).unwrap(), once);
    }

    #[test]
    fn absorbed_weights_reproduce_knocked_forward() {
        let cfg = AttentionConfig::new(8, 4, 2).unwrap();
        let w = AttentionWeights::<f32>::init(&cfg, &mut rng(7));
        let kha = init_knocking(
            &KhaConfig::linear(Sites::V).with_random_init(Some(0.5)),
            2,
            2,
            3,
        );
        let absorbed = absorb_linear(&w, &kha, &cfg).unwrap();
        assert_eq!((&absorbed.w_q, &absorbed.w_k), (&w.w_q, &w.w_k));
        let x = Tensor::randn(vec![5, 8], 1.0, &mut rng(8));
        let a = attention_eval(&x, &w, &cfg, Some(&kha)).unwrap();
        let b = attention_eval(&x, &absorbed, &cfg, None).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-5);
    }

    #[test]
    fn shared_matrix_collects_gradient_from_every_head() {
        let cfg = AttentionConfig::new(8, 4, 2).unwrap();
        let w = AttentionWeights::<f64>::init(&cfg, &mut rng(9));
        let kha = init_knocking::<f64>(&KhaConfig::linear(Sites::V), 2, 2, 0);
        let x = Tensor::randn(vec![4, 8], 1.0, &mut rng(10));

        let grad_tv = |w_v: &Tensor<f64>| {
            let mut w2 = w.clone();
            w2.w_v = w_v.clone();
            let mut tape = Tape::new();
            let wv = w2.bind(&mut tape, &mut Vec::new());
            let mut order = Vec::new();
            let mut kt = kha.clone();
            for (_, t) in kt.named_params_mut() {
                t.set_requires_grad(true);
            }
            let kv = kt.bind(&mut tape, &mut order);
            let xv = tape.constant(&x);
            let out = crate::attention::attention_forward(&mut tape, xv, &wv, &cfg, Some(&kv), 4)
                .unwrap();
            let l = tape.sum(out);
            tape.backward(l).unwrap();
            tape.grad(order[0]).unwrap().to_vec()
        };
        let full = grad_tv(&w.w_v);
        // silence group 0's value projection: its head no longer feeds T_V
        let mut silenced = w.w_v.clone();
        for r in 0..8 {
            silenced.data_mut()[r * 4] = 0.0;
            silenced.data_mut()[r * 4 + 1] = 0.0;
        }
        let partial = grad_tv(&silenced);
        assert_ne!(full, partial);
        assert!(partial.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn knocking_ops_pass_gradient_check() {
        let mut r = rng(11);
        let h = Tensor::<f64>::randn(vec![5, 3], 1.0, &mut r);
        let mats: Vec<Tensor<f64>> = (0..3)
            .map(|_| Tensor::randn(vec![3, 3], 0.7, &mut r))
            .collect();
        let proj = Tensor::<f64>::randn(vec![5, 3], 1.0, &mut r);
        let weigh = |t: &mut Tape<f64>, o: Var| -> Result<Var> {
            let p = t.constant(&proj);
            let m = t.mul(o, p)?;
            Ok(t.sum(m))
        };
        let all = [h.clone(), mats[0].clone(), mats[1].clone(), mats[2].clone()];
        for rep in check_gradients(&all, 1e-6, |t, v| {
            let o = kha_mlp_apply(t, v[0], v[1], v[2], v[3])?;
            weigh(t, o)
        })
        .unwrap()
        {
            assert!(rep.max_rel_err < 1e-4, "{rep:?}");
        }
        for rep in check_gradients(&all[..2], 1e-6, |t, v| {
            let o = kha_gate_apply(t, v[0], v[1])?;
            weigh(t, o)
        })
        .unwrap()
        {
            assert!(rep.max_rel_err < 1e-4, "{rep:?}");
        }
        for rep in check_gradients(&all[..2], 1e-6, |t, v| {
            let o = kha_linear_apply(t, v[0], v[1])?;
            weigh(t, o)
        })
        .unwrap()
        {
            assert!(rep.max_rel_err < 1e-4, "{rep:?}");
        }
    }
}
