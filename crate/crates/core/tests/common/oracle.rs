//! Loop-level reference implementations, independent of the tape.

use kha::attention::{AttentionConfig, AttentionWeights};
use kha::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat<T: kha::Element>(t: &Tensor<T>) -> Mat {
    let (r, c) = t.dims2().unwrap();
    (0..r)
        .map(|i| (0..c).map(|j| t.data()[i * c + j].as_f64()).collect())
        .collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for p in 0..k {
            for j in 0..m {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    out
}

fn cols(a: &Mat, lo: usize, hi: usize) -> Mat {
    a.iter().map(|r| r[lo..hi].to_vec()).collect()
}

fn rms(a: &Mat, gain: &[f64]) -> Mat {
    a.iter()
        .map(|r| {
            let ms = r.iter().map(|x| x * x).sum::<f64>() / r.len() as f64;
            let s = 1.0 / (ms + 1e-6).sqrt();
            r.iter().zip(gain).map(|(x, g)| x * s * g).collect()
        })
        .collect()
}

fn rope(a: &Mat, base: f64) -> Mat {
    a.iter()
        .enumerate()
        .map(|(pos, r)| {
            let d = r.len();
            let mut o = r.clone();
            for i in 0..d / 2 {
                let theta = pos as f64 * base.powf(-((2 * i) as f64) / d as f64);
                let (s, c) = theta.sin_cos();
                o[2 * i] = r[2 * i] * c - r[2 * i + 1] * s;
                o[2 * i + 1] = r[2 * i] * s + r[2 * i + 1] * c;
            }
            o
        })
        .collect()
}

/// Per-head transform applied after projection (identity when `None`).
pub type HeadFn<'a> = Option<&'a dyn Fn(&Mat) -> Mat>;

/// Attention with every head computed separately; query head `h` reads KV
/// head `h / (n / g)`.
pub fn naive_attention<T: kha::Element>(
    x: &Mat,
    w: &AttentionWeights<T>,
    cfg: &AttentionConfig,
    tq: HeadFn,
    tk: HeadFn,
    tv: HeadFn,
) -> Mat {
    let id = |m: &Mat| m.clone();
    let (wq, wk, wv, wo) = (
        to_mat(&w.w_q),
        to_mat(&w.w_k),
        to_mat(&w.w_v),
        to_mat(&w.w_o),
    );
    let (q_all, k_all, v_all) = (matmul(x, &wq), matmul(x, &wk), matmul(x, &wv));
    let len = x.len();
    let per = cfg.n_heads / cfg.kv_groups;
    let gain = |g: &Option<Tensor<T>>| {
        g.as_ref()
            .map(|t| t.data().iter().map(|v| v.as_f64()).collect::<Vec<f64>>())
    };
    let (qg, kg) = (gain(&w.q_norm), gain(&w.k_norm));
    let mut concat = vec![Vec::new(); len];
    for h in 0..cfg.n_heads {
        let kvh = h / per;
        let mut q = tq.map_or_else(
            || id(&cols(&q_all, h * cfg.d_k, (h + 1) * cfg.d_k)),
            |f| f(&cols(&q_all, h * cfg.d_k, (h + 1) * cfg.d_k)),
        );
        let mut k = tk.map_or_else(
            || id(&cols(&k_all, kvh * cfg.d_k, (kvh + 1) * cfg.d_k)),
            |f| f(&cols(&k_all, kvh * cfg.d_k, (kvh + 1) * cfg.d_k)),
        );
        let v = tv.map_or_else(
            || id(&cols(&v_all, kvh * cfg.d_v, (kvh + 1) * cfg.d_v)),
            |f| f(&cols(&v_all, kvh * cfg.d_v, (kvh + 1) * cfg.d_v)),
        );
        if cfg.qk_rmsnorm {
            q = rms(&q, qg.as_ref().unwrap());
            k = rms(&k, kg.as_ref().unwrap());
        }
        if cfg.rope {
            q = rope(&q, cfg.rope_base);
            k = rope(&k, cfg.rope_base);
        }
        let scale = 1.0 / (cfg.d_k as f64).sqrt();
        for i in 0..len {
            let visible = if cfg.causal { i + 1 } else { len };
            let logits: Vec<f64> = (0..visible)
                .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut o = vec![0.0; cfg.d_v];
            for (j, ej) in e.iter().enumerate() {
                for c in 0..cfg.d_v {
                    o[c] += ej / z * v[j][c];
                }
            }
            concat[i].extend(o);
        }
    }
    matmul(&concat, &wo)
}

pub fn max_diff(a: &Mat, b: &[f64]) -> f64 {
    a.iter()
        .flatten()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Same weights seen by an MHA layer: KV columns of each group repeated for
/// every query head in it.
pub fn expand_kv_to_mha<T: kha::Element>(
    w: &AttentionWeights<T>,
    cfg: &AttentionConfig,
) -> (AttentionWeights<T>, AttentionConfig) {
    let per = cfg.n_heads / cfg.kv_groups;
    let widen = |m: &Tensor<T>, dh: usize| {
        let (r, _) = m.dims2().unwrap();
        let c = cfg.n_heads * dh;
        Tensor::from_fn(vec![r, c], |ix| {
            let (i, j) = (ix / c, ix % c);
            let head = j / dh;
            let src = (head / per) * dh + j % dh;
            m.data()[i * m.shape()[1] + src]
        })
    };
    let mut mw = w.clone();
    mw.w_k = widen(&w.w_k, cfg.d_k);
    mw.w_v = widen(&w.w_v, cfg.d_v);
    let mut mcfg = cfg.clone();
    mcfg.kv_groups = cfg.n_heads;
    (mw, mcfg)
}
