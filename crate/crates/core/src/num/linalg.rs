//! Small dense kernels. Every output element is accumulated over the inner
//! dimension in ascending order, independent of how many rows are processed
//! together or how rows are split across threads, so a row computed alone
//! is bit-identical to the same row computed inside a larger batch.

use rayon::prelude::*;

use super::Real;

/// Rows handled per parallel task.
const ROWS_PER_TASK: usize = 64;
/// Register tile: rows by columns of outputs kept in accumulators.
const TR: usize = 4;
const TC: usize = 16;

/// `out[i, j] (+)= Σ_kk a[i, kk] · b[kk, j]` over all rows of `out`, each
/// element accumulated on its own in ascending `kk`.
fn gemm_kernel<T: Real>(a: &[T], b: &[T], out: &mut [T], k: usize, n: usize, accumulate: bool) {
    let rows = out.len() / n;
    let full_c = n - n % TC;
    let mut i0 = 0;
    while i0 + TR <= rows {
        let (a0, a1, a2, a3) = (
            &a[i0 * k..(i0 + 1) * k],
            &a[(i0 + 1) * k..(i0 + 2) * k],
            &a[(i0 + 2) * k..(i0 + 3) * k],
            &a[(i0 + 3) * k..(i0 + 4) * k],
        );
        let mut j0 = 0;
        while j0 < full_c {
            let mut acc = [[T::ZERO; TC]; TR];
            if accumulate {
                for (r, row) in acc.iter_mut().enumerate() {
                    row.copy_from_slice(&out[(i0 + r) * n + j0..(i0 + r) * n + j0 + TC]);
                }
            }
            let it = a0.iter().zip(a1).zip(a2).zip(a3).zip(b.chunks_exact(n));
            for ((((&x0, &x1), &x2), &x3), bc) in it {
                let br: &[T; TC] = bc[j0..j0 + TC].try_into().unwrap();
                for c in 0..TC {
                    acc[0][c] += x0 * br[c];
                    acc[1][c] += x1 * br[c];
                    acc[2][c] += x2 * br[c];
                    acc[3][c] += x3 * br[c];
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i0 + r) * n + j0..(i0 + r) * n + j0 + TC].copy_from_slice(row);
            }
            j0 += TC;
        }
        for i in i0..i0 + TR {
            edge_row(&a[i * k..(i + 1) * k], b, &mut out[i * n..(i + 1) * n], full_c, n, accumulate);
        }
        i0 += TR;
    }
    for i in i0..rows {
        edge_row(&a[i * k..(i + 1) * k], b, &mut out[i * n..(i + 1) * n], 0, n, accumulate);
    }
}

/// Columns `[from, n)` of one output row.
fn edge_row<T: Real>(a: &[T], b: &[T], out: &mut [T], from: usize, n: usize, accumulate: bool) {
    if from == n {
        return;
    }
    if !accumulate {
        out[from..].fill(T::ZERO);
    }
    for (&x, bc) in a.iter().zip(b.chunks_exact(n)) {
        for (o, &bv) in out[from..].iter_mut().zip(&bc[from..]) {
            *o += x * bv;
        }
    }
}

/// `out[m,n] = a[m,k] · b[k,n]`.
pub fn matmul<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    if n == 0 || m == 0 {
        return;
    }
    if m <= ROWS_PER_TASK {
        gemm_kernel(a, b, out, k, n, false);
        return;
    }
    out.par_chunks_mut(ROWS_PER_TASK * n)
        .zip(a.par_chunks(ROWS_PER_TASK * k))
        .for_each(|(o, a)| gemm_kernel(a, b, o, k, n, false));
}

/// `out[m,n] = a[m,k] · b[n,k]ᵀ`.
pub fn matmul_bt<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    matmul(a, &bt, out, m, k, n);
}

/// `out[k,n] += a[m,k]ᵀ · b[m,n]`, summed over rows in ascending order.
pub fn matmul_at_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), m * n);
    assert_eq!(out.len(), k * n);
    if n == 0 || k == 0 {
        return;
    }
    let at = transpose(a, m, k);
    gemm_kernel(&at, b, out, m, n, true);
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    assert_eq!(a.len(), rows * cols);
    let mut out = vec![T::ZERO; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Adds `bias[n]` to every row of `x[.., n]`.
pub fn add_bias<T: Real>(x: &mut [T], bias: &[T]) {
    let n = bias.len();
    for row in x.chunks_exact_mut(n) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub fn add_in_place<T: Real>(x: &mut [T], y: &[T]) {
    assert_eq!(x.len(), y.len());
    for (a, &b) in x.iter_mut().zip(y) {
        *a += b;
    }
}
