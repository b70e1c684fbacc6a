use std::ops::Range;

use super::kernels::{gemm, rms_norm_rows, rope_rows, sigmoid, softmax_rows_into, Mask};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Softmax(Var),
    Slice {
        src: Var,
        r0: usize,
        c0: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    Rope {
        x: Var,
        seq_len: usize,
        base: f64,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Node indices visited by one backward pass, in visiting order.
#[derive(Clone, Debug, Default)]
pub struct BackwardReport {
    pub visited: Vec<usize>,
}

/// Linear record of executed operations.
///
/// Nodes are appended in execution order, so walking indices downwards is
/// a valid reverse topological order. Leaf gradients accumulate across
/// `backward` calls until [`Tape::zero_grad`].
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
}

/// Gradient buffer of `v`, allocated on first use; None if `v` takes no gradient.
fn slot<'a, T: Element>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    let n = &nodes[v.0];
    if !n.needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n.value.len()]))
}

fn dims2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::shape(op, shape, &[0, 0])),
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a leaf; it participates in gradients iff the tensor does.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push_leaf(t, t.requires_grad())
    }

    /// Records a leaf that always receives a gradient.
    pub fn variable(&mut self, t: &Tensor<T>) -> Var {
        self.push_leaf(t, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, t: &Tensor<T>, requires_grad: bool) -> Var {
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            requires_grad,
        );
        if requires_grad {
            self.leaf_grads[v.0] = Some(vec![T::zero(); t.numel()]);
        }
        v
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        if n.shape.is_empty() {
            Tensor::scalar(n.value[0])
        } else {
            Tensor::new(n.shape.clone(), n.value.clone()).expect("tape shapes are consistent")
        }
    }

    /// Accumulated gradient of a leaf that requires one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        for g in self.leaf_grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    // ---- forward ops -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = dims2(self.shape(a), "matmul")?;
        let (br, bc) = dims2(self.shape(b), "matmul")?;
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            false,
            self.value(b),
            trans_b,
            &mut out,
            false,
        );
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, trans_b }, ng))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Vec<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let ng = self.any_grad(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, s), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let ng = self.any_grad(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Sigmoid(a), ng)
    }

    /// `x ⊙ sigmoid(x)`, recorded as two primitive ops.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let s = self.sigmoid(a);
        self.mul(a, s)
    }

    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var> {
        let (m, n) = dims2(self.shape(a), "softmax_rows")?;
        let mut out = vec![T::zero(); m * n];
        softmax_rows_into(self.value(a), m, n, mask, &mut out)?;
        let ng = self.any_grad(&[a]);
        Ok(self.push(vec![m, n], out, Op::Softmax(a), ng))
    }

    /// Copies the block `rows x cols` out of a matrix.
    pub fn slice(&mut self, src: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let (r, c) = dims2(self.shape(src), "slice")?;
        if rows.end > r || cols.end > c || rows.is_empty() || cols.is_empty() {
            return Err(Error::shape("slice", &[r, c], &[rows.end, cols.end]));
        }
        let (nr, nc) = (rows.len(), cols.len());
        let v = self.value(src);
        let mut out = Vec::with_capacity(nr * nc);
        for i in rows.clone() {
            out.extend_from_slice(&v[i * c + cols.start..i * c + cols.end]);
        }
        let ng = self.any_grad(&[src]);
        Ok(self.push(
            vec![nr, nc],
            out,
            Op::Slice {
                src,
                r0: rows.start,
                c0: cols.start,
            },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::shape("concat_cols", &[], &[]))?;
        let (r, _) = dims2(self.shape(first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = dims2(self.shape(p), "concat_cols")?;
            if pr != r {
                return Err(Error::shape(
                    "concat_cols",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let ng = self.any_grad(parts);
        Ok(self.push(vec![r, total], out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::shape("concat_rows", &[], &[]))?;
        let (_, c) = dims2(self.shape(first), "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = dims2(self.shape(p), "concat_rows")?;
            if pc != c {
                return Err(Error::shape(
                    "concat_rows",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            rows += pr;
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let ng = self.any_grad(parts);
        Ok(self.push(vec![rows, c], out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Row-wise `x / sqrt(mean(x²) + eps) ⊙ gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let (r, c) = dims2(self.shape(x), "rms_norm")?;
        if self.shape(gain) != [c] {
            return Err(Error::shape("rms_norm", self.shape(x), self.shape(gain)));
        }
        let mut out = vec![T::zero(); r * c];
        let inv_rms = rms_norm_rows(self.value(x), c, self.value(gain), eps, &mut out);
        let ng = self.any_grad(&[x, gain]);
        Ok(self.push(vec![r, c], out, Op::RmsNorm { x, gain, inv_rms }, ng))
    }

    /// Rotary position embedding; row `r` is at position `r % seq_len`.
    pub fn rope(&mut self, x: Var, seq_len: usize, base: f64) -> Result<Var> {
        let (r, c) = dims2(self.shape(x), "rope")?;
        if c % 2 != 0 || seq_len == 0 {
            return Err(Error::shape("rope", &[r, c], &[seq_len, 2]));
        }
        let mut out = vec![T::zero(); r * c];
        rope_rows(self.value(x), c, seq_len, base, false, &mut out);
        let ng = self.any_grad(&[x]);
        Ok(self.push(vec![r, c], out, Op::Rope { x, seq_len, base }, ng))
    }

    /// Gathers rows of `table` by index.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = dims2(self.shape(table), "embedding")?;
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::shape("embedding", &[vocab, d], &[bad]));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let ng = self.any_grad(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-softmax(`logits`).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = dims2(self.shape(logits), "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::LengthMismatch(n, targets.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::shape("cross_entropy", &[n, v], &[bad]));
        }
        let mut probs = vec![T::zero(); n * v];
        softmax_rows_into(self.value(logits), n, v, None, &mut probs)?;
        let lv = self.value(logits);
        let mut total = 0.0f64;
        for (i, &t) in targets.iter().enumerate() {
            let row = &lv[i * v..(i + 1) * v];
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            total += (lse - row[t]).as_f64();
        }
        let loss = T::from_f64(total / n as f64);
        let ng = self.any_grad(&[logits]);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let ng = self.any_grad(&[a]);
        self.push(Vec::new(), vec![s], Op::Sum(a), ng)
    }

    // ---- reverse pass ------------------------------------------------

    /// Propagates d(loss)/d(node) back to every reachable leaf that
    /// requires a gradient, adding into its accumulator.
    pub fn backward(&mut self, loss: Var) -> Result<BackwardReport> {
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: ln.shape.clone(),
            });
        }
        let mut report = BackwardReport::default();
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            report.visited.push(i);
            self.backprop_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                if let Some(acc) = &mut self.leaf_grads[i] {
                    for (a, &d) in acc.iter_mut().zip(&g) {
                        *a += d;
                    }
                }
            }
        }
        Ok(report)
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = node.shape[1];
                let bv = &nodes[b.0].value;
                let av = &nodes[a.0].value;
                if let Some(ga) = slot(nodes, grads, *a) {
                    // dA = dC · op(B)ᵀ
                    gemm(m, n, k, g, false, bv, !*trans_b, ga, true);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    if *trans_b {
                        // B is n×k: dB = dCᵀ · A
                        gemm(n, m, k, g, true, av, false, gb, true);
                    } else {
                        // B is k×n: dB = Aᵀ · dC
                        gemm(k, m, n, av, true, g, false, gb, true);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, &d)| *x += d);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, &d)| *x -= d);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((x, &d), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *x += d * y;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for ((x, &d), &y) in gb.iter_mut().zip(g).zip(av) {
                        *x += d * y;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d * *s);
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((x, &d), &y) in ga.iter_mut().zip(g).zip(&node.value) {
                        *x += d * y * (T::one() - y);
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let n = node.shape[1];
                    for ((gx, gy), y) in ga.chunks_mut(n).zip(g.chunks(n)).zip(node.value.chunks(n))
                    {
                        let dot: T = gy.iter().zip(y).map(|(&d, &p)| d * p).sum();
                        for ((x, &d), &p) in gx.iter_mut().zip(gy).zip(y) {
                            *x += p * (d - dot);
                        }
                    }
                }
            }
            Op::Slice { src, r0, c0 } => {
                let sc = nodes[src.0].shape[1];
                let nc = node.shape[1];
                if let Some(gs) = slot(nodes, grads, *src) {
                    for (i, row) in g.chunks(nc).enumerate() {
                        let off = (r0 + i) * sc + c0;
                        gs[off..off + nc]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(x, &d)| *x += d);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p.0].shape[1];
                    if let Some(gp) = slot(nodes, grads, p) {
                        for (row_p, row_g) in gp.chunks_mut(w).zip(g.chunks(total)) {
                            row_p
                                .iter_mut()
                                .zip(&row_g[off..off + w])
                                .for_each(|(x, &d)| *x += d);
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if let Some(gp) = slot(nodes, grads, p) {
                        gp.iter_mut()
                            .zip(&g[off..off + len])
                            .for_each(|(x, &d)| *x += d);
                    }
                    off += len;
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let c = node.shape[1];
                let (xv, gv) = (&nodes[x.0].value, &nodes[gain.0].value);
                let cn = T::from_f64(c as f64);
                if let Some(gg) = slot(nodes, grads, *gain) {
                    for ((row_g, row_x), &r) in g.chunks(c).zip(xv.chunks(c)).zip(inv_rms) {
                        for ((acc, &d), &xv) in gg.iter_mut().zip(row_g).zip(row_x) {
                            *acc += d * xv * r;
                        }
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (((row_dx, row_g), row_x), &r) in gx
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(xv.chunks(c))
                        .zip(inv_rms)
                    {
                        let dot: T = row_g
                            .iter()
                            .zip(gv)
                            .zip(row_x)
                            .map(|((&d, &w), &xv)| d * w * xv)
                            .sum();
                        let k = r * r * r * dot / cn;
                        for (((dx, &d), &w), &xv) in row_dx.iter_mut().zip(row_g).zip(gv).zip(row_x)
                        {
                            *dx += r * w * d - k * xv;
                        }
                    }
                }
            }
            Op::Rope { x, seq_len, base } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let c = node.shape[1];
                    let mut tmp = vec![T::zero(); g.len()];
                    rope_rows(g, c, *seq_len, *base, true, &mut tmp);
                    gx.iter_mut().zip(&tmp).for_each(|(a, &d)| *a += d);
                }
            }
            Op::Embedding { table, ids } => {
                let d = node.shape[1];
                if let Some(gt) = slot(nodes, grads, *table) {
                    for (&id, row) in ids.iter().zip(g.chunks(d)) {
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(x, &dv)| *x += dv);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = nodes[logits.0].shape[1];
                let scale = g[0] / T::from_f64(targets.len() as f64);
                if let Some(gl) = slot(nodes, grads, *logits) {
                    for (i, &t) in targets.iter().enumerate() {
                        let row = &mut gl[i * v..(i + 1) * v];
                        for (x, &p) in row.iter_mut().zip(&probs[i * v..(i + 1) * v]) {
                            *x += p * scale;
                        }
                        row[t] -= scale;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
        }
    }
}
