//! Row-major GEMM wrappers over `matrixmultiply`.
//!
//! Each output element is accumulated in a fixed order that depends only on
//! the inner dimension, so a row's result never depends on which other rows
//! share the call. Zero-filled and deleted inputs therefore agree bit for bit.

/// `out[n x m] = x[n x k] * w[m x k]^T` (+ `out` when `accumulate`).
pub(crate) fn matmul_nt(x: &[f64], w: &[f64], out: &mut [f64], n: usize, k: usize, m: usize, accumulate: bool) {
    debug_assert_eq!(x.len(), n * k);
    debug_assert_eq!(w.len(), m * k);
    debug_assert_eq!(out.len(), n * m);
    if n == 0 || m == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.fill(0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above and the strides describe
    // in-bounds row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            n, k, m, 1.0,
            x.as_ptr(), k as isize, 1,
            w.as_ptr(), 1, k as isize,
            beta,
            out.as_mut_ptr(), m as isize, 1,
        );
    }
}

/// `out[n x k] = dy[n x m] * w[m x k]` (+ `out` when `accumulate`).
pub(crate) fn matmul_nn(dy: &[f64], w: &[f64], out: &mut [f64], n: usize, m: usize, k: usize, accumulate: bool) {
    debug_assert_eq!(dy.len(), n * m);
    debug_assert_eq!(w.len(), m * k);
    debug_assert_eq!(out.len(), n * k);
    if n == 0 || k == 0 {
        return;
    }
    if m == 0 {
        if !accumulate {
            out.fill(0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: see `matmul_nt`.
    unsafe {
        matrixmultiply::dgemm(
            n, m, k, 1.0,
            dy.as_ptr(), m as isize, 1,
            w.as_ptr(), k as isize, 1,
            beta,
            out.as_mut_ptr(), k as isize, 1,
        );
    }
}

/// `out[m x k] += dy[n x m]^T * x[n x k]`.
pub(crate) fn matmul_tn_acc(dy: &[f64], x: &[f64], out: &mut [f64], n: usize, m: usize, k: usize) {
    debug_assert_eq!(dy.len(), n * m);
    debug_assert_eq!(x.len(), n * k);
    debug_assert_eq!(out.len(), m * k);
    if n == 0 || m == 0 || k == 0 {
        return;
    }
    // SAFETY: see `matmul_nt`.
    unsafe {
        matrixmultiply::dgemm(
            m, n, k, 1.0,
            dy.as_ptr(), 1, m as isize,
            x.as_ptr(), k as isize, 1,
            1.0,
            out.as_mut_ptr(), k as isize, 1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn rand_vec(n: usize, r: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn products_match_naive_loops() {
        let mut r = rng::from_seed(1);
        let (n, k, m) = (7, 5, 3);
        let x = rand_vec(n * k, &mut r);
        let w = rand_vec(m * k, &mut r);
        let mut y = vec![0.0; n * m];
        matmul_nt(&x, &w, &mut y, n, k, m, false);
        for i in 0..n {
            for j in 0..m {
                let e: f64 = (0..k).map(|p| x[i * k + p] * w[j * k + p]).sum();
                assert!((e - y[i * m + j]).abs() < 1e-12);
            }
        }
        let dy = rand_vec(n * m, &mut r);
        let mut dx = vec![0.0; n * k];
        matmul_nn(&dy, &w, &mut dx, n, m, k, false);
        let mut dw = vec![0.5; m * k];
        matmul_tn_acc(&dy, &x, &mut dw, n, m, k);
        for i in 0..n {
            for p in 0..k {
                let e: f64 = (0..m).map(|j| dy[i * m + j] * w[j * k + p]).sum();
                assert!((e - dx[i * k + p]).abs() < 1e-12);
            }
        }
        for j in 0..m {
            for p in 0..k {
                let e: f64 = 0.5 + (0..n).map(|i| dy[i * m + j] * x[i * k + p]).sum::<f64>();
                assert!((e - dw[j * k + p]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rows_are_bitwise_independent_of_batch() {
        let mut r = rng::from_seed(2);
        for &(n, k, m) in &[(1, 35, 128), (37, 35, 128), (300, 130, 32), (9, 600, 17), (64, 3, 5)] {
            let x = rand_vec(n * k, &mut r);
            let w = rand_vec(m * k, &mut r);
            let mut full = vec![0.0; n * m];
            matmul_nt(&x, &w, &mut full, n, k, m, false);
            for i in [0, n / 2, n - 1] {
                let mut one = vec![0.0; m];
                matmul_nt(&x[i * k..(i + 1) * k], &w, &mut one, 1, k, m, false);
                assert_eq!(&full[i * m..(i + 1) * m], one.as_slice());
            }
        }
    }
}
