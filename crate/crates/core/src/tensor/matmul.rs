//! Raw row-major matrix kernels. The ikj loop order keeps the inner loop
//! contiguous so LLVM can vectorize it.

use crate::scalar::Scalar;

/// out = a @ b, with a: m x k, b: k x n. `out` must hold m*n elements and is
/// overwritten.
pub fn matmul_into<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for v in out.iter_mut() {
        *v = S::zero();
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == S::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}

pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    matmul_into(a, b, m, k, n, &mut out);
    out
}

/// Transpose an r x c row-major matrix.
pub fn transpose<S: Scalar>(a: &[S], r: usize, c: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), r * c);
    let mut out = vec![S::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// out = a @ b^T, with a: m x k, b: n x k.
pub fn matmul_bt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            orow[j] = acc;
        }
    }
    out
}

/// out = a^T @ b, with a: k x m, b: k x n.
pub fn matmul_at<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![S::zero(); m * n];
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aik = arow[i];
            if aik == S::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_agreement() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 + 0.5).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.25 - 1.0).collect(); // 3x4
        let ab = matmul(&a, &b, 2, 3, 4);
        let bt = transpose(&b, 3, 4);
        let via_bt = matmul_bt(&a, &bt, 2, 3, 4);
        let at = transpose(&a, 2, 3);
        let via_at = matmul_at(&at, &b, 2, 3, 4);
        for i in 0..8 {
            assert!((ab[i] - via_bt[i]).abs() < 1e-12);
            assert!((ab[i] - via_at[i]).abs() < 1e-12);
        }
    }
}
