//! Slice-level kernels shared by [`crate::Tensor`] and the tape.

use crate::par::{self, Execution};

/// Below this many multiply-adds a product runs sequentially.
const PAR_MIN_WORK: usize = 1 << 15;

fn rows_per_task(m: usize) -> usize {
    #[cfg(feature = "parallel")]
    let threads = rayon::current_num_threads().max(1);
    #[cfg(not(feature = "parallel"))]
    let threads = 1;
    m.div_ceil(threads * 4).max(1)
}

/// `out[m,n] = a[m,k] · b[k,n]` (overwrites `out`).
pub fn gemm_nn(exec: Execution, a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let exec = if m * k * n < PAR_MIN_WORK {
        Execution::Sequential
    } else {
        exec
    };
    let rows = rows_per_task(m);
    par::for_each_chunk_mut(exec, out, rows * n, |chunk, block| {
        let row0 = chunk * rows;
        for (r, out_row) in block.chunks_mut(n).enumerate() {
            let i = row0 + r;
            out_row.iter_mut().for_each(|v| *v = 0.0);
            let a_row = &a[i * k..(i + 1) * k];
            for (p, &aip) in a_row.iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += aip * bv;
                }
            }
        }
    });
}

pub fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// `out[m,n] = a[m,k] · b[n,k]ᵀ`.
pub fn gemm_nt(exec: Execution, a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let bt = transpose(b, n, k);
    gemm_nn(exec, a, &bt, m, k, n, out);
}

/// `out[k,n] = a[m,k]ᵀ · b[m,n]`.
pub fn gemm_tn(exec: Execution, a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let at = transpose(a, m, k);
    gemm_nn(exec, &at, b, k, m, n, out);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax over consecutive rows of length `cols`.
pub fn softmax_rows_inplace(data: &mut [f64], cols: usize) {
    if cols == 0 {
        return;
    }
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

/// Log-sum-exp of one row.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-row layer normalization. Returns (output, normalized input, 1/std per row).
pub fn layer_norm_rows(x: &[f64], cols: usize, gamma: &[f64], beta: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / cols;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let s = 1.0 / (var + eps).sqrt();
        rstd[r] = s;
        for c in 0..cols {
            let h = (row[c] - mean) * s;
            xhat[r * cols + c] = h;
            out[r * cols + c] = h * gamma[c] + beta[c];
        }
    }
    (out, xhat, rstd)
}
