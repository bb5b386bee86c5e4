//! Row-wise building blocks with explicit backward passes. Every forward
//! routine processes rows independently so incremental decoding reproduces
//! the full pass bit for bit.

use crate::num::{matmul, matmul_at_acc, matmul_bt, Real};

pub const LN_EPS: f64 = 1e-5;

/// `y[m, n] = x[m, k] · w[k, n] + b[n]`.
pub fn linear<T: Real>(x: &[T], w: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut y = vec![T::ZERO; m * n];
    matmul(x, w, &mut y, m, k, n);
    crate::num::add_bias(&mut y, b);
    y
}

/// Accumulates weight and bias gradients and returns the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    dw: &mut [T],
    db: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    matmul_at_acc(x, dy, dw, m, k, n);
    for row in dy.chunks_exact(n) {
        for (g, &v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
    let mut dx = vec![T::ZERO; m * k];
    matmul_bt(dy, w, &mut dx, m, n, k);
    dx
}

/// Normalized rows (before scale and shift) and per-row reciprocal std.
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm<T: Real>(x: &[T], g: &[T], b: &[T], n: usize) -> (Vec<T>, NormCache<T>) {
    let rows = x.len() / n;
    let mut y = vec![T::ZERO; x.len()];
    let mut xhat = vec![T::ZERO; x.len()];
    let mut rstd = vec![T::ZERO; rows];
    let inv_n = T::of(1.0 / n as f64);
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let mean = row.iter().copied().sum::<T>() * inv_n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let rs = T::ONE / (var + T::of(LN_EPS)).sqrt();
        rstd[r] = rs;
        for c in 0..n {
            let h = (row[c] - mean) * rs;
            xhat[r * n + c] = h;
            y[r * n + c] = h * g[c] + b[c];
        }
    }
    (y, NormCache { xhat, rstd })
}

pub fn layer_norm_backward<T: Real>(
    cache: &NormCache<T>,
    g: &[T],
    dy: &[T],
    dg: &mut [T],
    db: &mut [T],
    n: usize,
) -> Vec<T> {
    let rows = dy.len() / n;
    let mut dx = vec![T::ZERO; dy.len()];
    let inv_n = T::of(1.0 / n as f64);
    for r in 0..rows {
        let xh = &cache.xhat[r * n..(r + 1) * n];
        let d = &dy[r * n..(r + 1) * n];
        let mut sum_dh = T::ZERO;
        let mut sum_dh_xh = T::ZERO;
        for c in 0..n {
            dg[c] += d[c] * xh[c];
            db[c] += d[c];
            let dh = d[c] * g[c];
            sum_dh += dh;
            sum_dh_xh += dh * xh[c];
        }
        let rs = cache.rstd[r];
        for c in 0..n {
            let dh = d[c] * g[c];
            dx[r * n + c] = rs * (dh - inv_n * sum_dh - xh[c] * inv_n * sum_dh_xh);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU, written as `x · σ(2u)` which equals
/// `0.5 x (1 + tanh u)`.
pub fn gelu<T: Real>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    x / (T::ONE + (-(u + u)).exp())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let s = T::ONE / (T::ONE + (-(u + u)).exp());
    let du = T::of(GELU_C) * (T::ONE + T::of(3.0 * GELU_A) * x * x);
    s + x * s * (T::ONE - s) * (du + du)
}

const LANES: usize = 8;

/// Dot product with eight interleaved partial sums combined in a fixed
/// order.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::ZERO; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::ZERO;
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    let s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    s + tail
}

#[inline]
fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Range of key positions visible from query position `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Visibility {
    pub causal: bool,
    /// Maximum |i - j|; `None` is unbounded.
    pub window: Option<usize>,
}

impl Visibility {
    pub fn range(&self, i: usize, len: usize) -> (usize, usize) {
        let w = self.window.unwrap_or(usize::MAX);
        let lo = i.saturating_sub(w);
        let hi = if self.causal { i + 1 } else { i.saturating_add(w).saturating_add(1).min(len) };
        (lo, hi)
    }
}

/// Attention of one query head over keys/values `[lo, hi)`, rows of width
/// `stride` with the head at column offset `off`. Writes the probabilities
/// into `probs` and the result into `out`.
#[allow(clippy::too_many_arguments)]
pub fn attend_row<T: Real>(
    q: &[T],
    keys: &[T],
    values: &[T],
    stride: usize,
    off: usize,
    dh: usize,
    lo: usize,
    hi: usize,
    probs: &mut [T],
    out: &mut [T],
) {
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut m = T::of(f64::NEG_INFINITY);
    for (p, j) in probs.iter_mut().zip(lo..hi) {
        *p = dot(q, &keys[j * stride + off..j * stride + off + dh]) * scale;
        m = m.max(*p);
    }
    let mut sum = T::ZERO;
    for p in probs.iter_mut() {
        *p = (*p - m).exp();
        sum += *p;
    }
    let inv = T::ONE / sum;
    for p in probs.iter_mut() {
        *p *= inv;
    }
    out.fill(T::ZERO);
    for (&p, j) in probs.iter().zip(lo..hi) {
        axpy(out, p, &values[j * stride + off..j * stride + off + dh]);
    }
}

/// Multi-head attention of `nq` query rows over `nk` key rows. Row `i` sees
/// keys `range(i)`. Returns outputs `[nq, d]` and the flattened
/// probabilities (per head, per row, `hi - lo` entries).
#[allow(clippy::too_many_arguments)]
pub fn attention<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    nq: usize,
    d: usize,
    heads: usize,
    range: impl Fn(usize) -> (usize, usize),
) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let total: usize = (0..nq).map(|i| {
        let (lo, hi) = range(i);
        hi - lo
    }).sum();
    let mut probs = vec![T::ZERO; total * heads];
    let mut out = vec![T::ZERO; nq * d];
    let mut off = 0;
    for h in 0..heads {
        for i in 0..nq {
            let (lo, hi) = range(i);
            let n = hi - lo;
            attend_row(
                &q[i * d + h * dh..i * d + (h + 1) * dh],
                k,
                v,
                d,
                h * dh,
                dh,
                lo,
                hi,
                &mut probs[off..off + n],
                &mut out[i * d + h * dh..i * d + (h + 1) * dh],
            );
            off += n;
        }
    }
    (out, probs)
}

/// Gradients of `attention` w.r.t. q, k and v.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    nq: usize,
    nk: usize,
    d: usize,
    heads: usize,
    range: impl Fn(usize) -> (usize, usize),
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut dq = vec![T::ZERO; nq * d];
    let mut dk = vec![T::ZERO; nk * d];
    let mut dv = vec![T::ZERO; nk * d];
    let mut dp = Vec::new();
    let mut off = 0;
    for h in 0..heads {
        let c = h * dh;
        for i in 0..nq {
            let (lo, hi) = range(i);
            let p = &probs[off..off + hi - lo];
            off += hi - lo;
            let go = &dout[i * d + c..i * d + c + dh];
            dp.clear();
            let mut pdot = T::ZERO;
            for (&pj, j) in p.iter().zip(lo..hi) {
                let s = dot(go, &v[j * d + c..j * d + c + dh]);
                dp.push(s);
                pdot += pj * s;
                axpy(&mut dv[j * d + c..j * d + c + dh], pj, go);
            }
            let qi = &q[i * d + c..i * d + c + dh];
            for ((&pj, &dpj), j) in p.iter().zip(&dp).zip(lo..hi) {
                let ds = pj * (dpj - pdot) * scale;
                axpy(&mut dq[i * d + c..i * d + c + dh], ds, &k[j * d + c..j * d + c + dh]);
                axpy(&mut dk[j * d + c..j * d + c + dh], ds, qi);
            }
        }
    }
    (dq, dk, dv)
}

/// Sinusoidal features of a scalar in `[0, 1]`: `[sin(τ f_k), cos(τ f_k)]`
/// with frequencies spaced geometrically from 1 to 1000.
pub fn time_features<T: Real>(tau: f64, n: usize) -> Vec<T> {
    let half = n / 2;
    let mut out = Vec::with_capacity(n);
    for k in 0..half {
        let f = 1000f64.powf(k as f64 / half.max(1) as f64);
        out.push(T::of((tau * f).sin()));
    }
    for k in 0..half {
        let f = 1000f64.powf(k as f64 / half.max(1) as f64);
        out.push(T::of((tau * f).cos()));
    }
    out
}
