//! Dense matrix kernels.
//!
//! Each kernel has a sequential form and, with the `parallel` feature, a
//! row-parallel form. Both compute every output element with the same
//! summation order, so their results are bit-identical.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work (m·k·n) below which the parallel kernels stay sequential.
pub const PAR_THRESHOLD: usize = 1 << 16;

#[inline]
fn matmul_row(a_row: &[f64], b: &[f64], n: usize, out: &mut [f64]) {
    for (p, &av) in a_row.iter().enumerate() {
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in out.iter_mut().zip(b_row) {
            *o += av * bv;
        }
    }
}

/// `a[m,k] · b[k,n]`, sequential.
pub fn matmul_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if n == 0 {
        return out;
    }
    for (i, row) in out.chunks_mut(n).enumerate() {
        matmul_row(&a[i * k..(i + 1) * k], b, n, row);
    }
    out
}

/// `a[m,k] · b[k,n]`, one rayon task per output row.
#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if n == 0 {
        return out;
    }
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        matmul_row(&a[i * k..(i + 1) * k], b, n, row);
    });
    out
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        return matmul_par(a, b, m, k, n);
    }
    matmul_seq(a, b, m, k, n)
}

/// Transpose of a row-major `[m, n]` matrix.
pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Evaluates `f(i)` for every row index. Rows are independent, so the
/// parallel form is bit-identical to the sequential one.
pub fn map_rows<F>(n_rows: usize, f: F) -> Vec<f64>
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n_rows).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n_rows).map(f).collect()
    }
}

pub fn map_rows_seq<F>(n_rows: usize, f: F) -> Vec<f64>
where
    F: Fn(usize) -> f64,
{
    (0..n_rows).map(f).collect()
}
