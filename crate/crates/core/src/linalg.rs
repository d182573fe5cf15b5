//! Small dense kernels on row-major slices. Sizes here are tiny (state
//! dimension, regression feature count), so nothing is blocked or pivoted
//! beyond what stability needs.

use crate::scalar::Real;

/// In-place Cholesky factorisation of a symmetric positive definite `k×k`
/// matrix. Returns `false` when a pivot falls below `k·eps·max_diag`, which
/// is how rank deficiency shows up in normal equations.
pub fn cholesky_in_place<T: Real>(a: &mut [T], k: usize) -> bool {
    let max_diag = (0..k).map(|i| a[i * k + i].abs()).fold(T::zero(), T::max);
    let floor = T::from_count(k.max(1)) * T::epsilon() * max_diag.max(T::min_positive_value());
    for j in 0..k {
        let mut d = a[j * k + j];
        for p in 0..j {
            d -= a[j * k + p] * a[j * k + p];
        }
        if !(d > floor) {
            return false;
        }
        let d = d.sqrt();
        a[j * k + j] = d;
        for i in (j + 1)..k {
            let mut s = a[i * k + j];
            for p in 0..j {
                s -= a[i * k + p] * a[j * k + p];
            }
            a[i * k + j] = s / d;
        }
    }
    for i in 0..k {
        for j in (i + 1)..k {
            a[i * k + j] = T::zero();
        }
    }
    true
}

/// Solves `L Lᵀ X = B` for `r` right-hand sides stored row-major in `b`
/// (`k×r`), overwriting `b` with `X`.
pub fn cholesky_solve<T: Real>(l: &[T], k: usize, b: &mut [T], r: usize) {
    for c in 0..r {
        for i in 0..k {
            let mut s = b[i * r + c];
            for p in 0..i {
                s -= l[i * k + p] * b[p * r + c];
            }
            b[i * r + c] = s / l[i * k + i];
        }
        for i in (0..k).rev() {
            let mut s = b[i * r + c];
            for p in (i + 1)..k {
                s -= l[p * k + i] * b[p * r + c];
            }
            b[i * r + c] = s / l[i * k + i];
        }
    }
}

/// Cyclic Jacobi eigen-decomposition of a symmetric `n×n` matrix.
/// Returns eigenvalues and the matrix of eigenvectors (columns, row-major).
pub fn symmetric_eigen<T: Real>(sym: &[T], n: usize) -> (Vec<T>, Vec<T>) {
    let mut a = sym.to_vec();
    let mut v = vec![T::zero(); n * n];
    for i in 0..n {
        v[i * n + i] = T::one();
    }
    let two = T::lit(2.0);
    for _sweep in 0..100 {
        let off: T = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        let scale: T = a.iter().map(|x| *x * *x).sum();
        if off <= T::epsilon() * T::epsilon() * scale || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == T::zero() {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (two * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

/// Induced 2-norm of a row-major `rows×cols` matrix.
pub fn spectral_norm<T: Real>(m: &[T], rows: usize, cols: usize) -> T {
    if rows == 0 || cols == 0 {
        return T::zero();
    }
    let mut gram = vec![T::zero(); cols * cols];
    for i in 0..cols {
        for j in 0..cols {
            gram[i * cols + j] = (0..rows).map(|r| m[r * cols + i] * m[r * cols + j]).sum();
        }
    }
    let (vals, _) = symmetric_eigen(&gram, cols);
    vals.into_iter().fold(T::zero(), T::max).sqrt()
}

/// `out = m · x` for a row-major `rows×cols` matrix.
pub fn matvec<T: Real>(m: &[T], rows: usize, cols: usize, x: &[T], out: &mut [T]) {
    for r in 0..rows {
        out[r] = (0..cols).map(|c| m[r * cols + c] * x[c]).sum();
    }
}

/// `out = mᵀ · x` for a row-major `rows×cols` matrix.
pub fn matvec_t<T: Real>(m: &[T], rows: usize, cols: usize, x: &[T], out: &mut [T]) {
    for c in 0..cols {
        out[c] = (0..rows).map(|r| m[r * cols + c] * x[r]).sum();
    }
}
