use std::sync::atomic::{AtomicUsize, Ordering};

use super::Element;
use crate::error::{Error, Result};

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Caps the number of threads a single matrix product may use. Results are
/// identical for any setting: work is split by output rows only.
pub fn set_intra_op_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn intra_op_threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

/// Positions excluded from a softmax.
#[derive(Clone, Debug, PartialEq)]
pub enum Mask {
    /// Column `j` is disallowed for row `i` when `j > i`.
    Causal,
    /// Row-major flags, `true` marks a disallowed position.
    Explicit(Vec<bool>),
}

impl Mask {
    #[inline]
    fn blocked(&self, n: usize, i: usize, j: usize) -> bool {
        match self {
            Mask::Causal => j > i,
            Mask::Explicit(flags) => flags[i * n + j],
        }
    }
}

struct SendPtr<T>(*const T);
unsafe impl<T> Send for SendPtr<T> {}
impl<T> SendPtr<T> {
    fn get(&self) -> *const T {
        self.0
    }
}

/// `C (+)= op(A) op(B)` for row-major storage, where `op(A)` is `m x k`
/// and `op(B)` is `k x n`. A transposed operand is stored in its
/// untransposed layout (`k x m` for A, `n x k` for B).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm lhs length");
    assert_eq!(b.len(), k * n, "gemm rhs length");
    assert_eq!(c.len(), m * n, "gemm out length");
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };

    let threads = intra_op_threads().min(m);
    if threads <= 1 || m * k * n < (1 << 18) {
        // SAFETY: lengths asserted above; strides describe those buffers.
        unsafe {
            T::gemm_raw(
                m,
                k,
                n,
                T::one(),
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        return;
    }

    let rows_per = m.div_ceil(threads);
    std::thread::scope(|s| {
        for (chunk_idx, c_chunk) in c.chunks_mut(rows_per * n).enumerate() {
            let r0 = chunk_idx * rows_per;
            let rows = c_chunk.len() / n;
            let a_ptr = SendPtr(unsafe { a.as_ptr().offset(r0 as isize * rsa) });
            let b_ptr = SendPtr(b.as_ptr());
            s.spawn(move || {
                // SAFETY: the row block [r0, r0 + rows) of op(A) lies inside `a`,
                // and each thread owns a disjoint slice of `c`.
                unsafe {
                    T::gemm_raw(
                        rows,
                        k,
                        n,
                        T::one(),
                        a_ptr.get(),
                        rsa,
                        csa,
                        b_ptr.get(),
                        rsb,
                        csb,
                        beta,
                        c_chunk.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            });
        }
    });
}

#[inline]
pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Max-subtracted softmax over each row of an `m x n` block.
pub(crate) fn softmax_rows_into<T: Element>(
    x: &[T],
    m: usize,
    n: usize,
    mask: Option<&Mask>,
    out: &mut [T],
) -> Result<()> {
    if let Some(Mask::Explicit(flags)) = mask {
        if flags.len() != m * n {
            return Err(Error::shape("softmax mask", &[m, n], &[flags.len()]));
        }
    }
    for i in 0..m {
        let row = &x[i * n..(i + 1) * n];
        let dst = &mut out[i * n..(i + 1) * n];
        let allowed = |j: usize| mask.is_none_or(|mk| !mk.blocked(n, i, j));
        let mut max = T::neg_infinity();
        let mut any = false;
        for (j, &v) in row.iter().enumerate() {
            if allowed(j) {
                any = true;
                if v > max {
                    max = v;
                }
            }
        }
        if !any {
            return Err(Error::FullyMaskedRow { row: i });
        }
        let mut sum = T::zero();
        for (j, (&v, d)) in row.iter().zip(dst.iter_mut()).enumerate() {
            *d = if allowed(j) {
                (v - max).exp()
            } else {
                T::zero()
            };
            sum += *d;
        }
        let inv = T::one() / sum;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    Ok(())
}

/// Per-row RMS normalisation with a shared gain; returns the per-row
/// reciprocal RMS so the backward pass can reuse it.
pub(crate) fn rms_norm_rows<T: Element>(
    x: &[T],
    cols: usize,
    gain: &[T],
    eps: T,
    out: &mut [T],
) -> Vec<T> {
    let n = T::from_f64(cols as f64);
    x.chunks(cols)
        .zip(out.chunks_mut(cols))
        .map(|(row, dst)| {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / n;
            let r = T::one() / (ms + eps).sqrt();
            for ((d, &v), &g) in dst.iter_mut().zip(row).zip(gain) {
                *d = v * r * g;
            }
            r
        })
        .collect()
}

/// Rotary embedding on interleaved pairs `(2i, 2i + 1)` of each row. Row
/// `r` sits at position `r % seq_len`. `inverse` rotates by the negative
/// angle, which is the transpose used in the backward pass.
pub(crate) fn rope_rows<T: Element>(
    x: &[T],
    cols: usize,
    seq_len: usize,
    base: f64,
    inverse: bool,
    out: &mut [T],
) {
    let half = cols / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| base.powf(-2.0 * i as f64 / cols as f64))
        .collect();
    for (r, (row, dst)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let pos = (r % seq_len) as f64;
        for (i, &f) in freqs.iter().enumerate() {
            let (s, c) = (pos * f).sin_cos();
            let (s, c) = (T::from_f64(if inverse { -s } else { s }), T::from_f64(c));
            let (x0, x1) = (row[2 * i], row[2 * i + 1]);
            dst[2 * i] = x0 * c - x1 * s;
            dst[2 * i + 1] = x0 * s + x1 * c;
        }
    }
}
