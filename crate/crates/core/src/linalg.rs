//! Dense symmetric positive definite kernels used by the mixture model.
//!
//! Everything routes through an explicit lower Cholesky factor; there is
//! no general LU or pivoting here because the callers only ever face SPD
//! matrices (covariances with jitter on the diagonal).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::{Error, Result};

/// Lower Cholesky factor L of an SPD matrix, A = L Lᵀ.
///
/// Fails with `NotPositiveDefinite` when a pivot drops to or below zero;
/// callers decide whether to jitter and retry.
pub fn cholesky(a: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::shape("cholesky", format!("{}x{}", a.nrows(), a.ncols())));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite {
                context: Some(format!("pivot {j} = {d:e}")),
            });
        }
        let dj = d.sqrt();
        l[[j, j]] = dj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / dj;
        }
    }
    Ok(l)
}

/// Solve L x = b for lower-triangular L.
pub fn solve_lower(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[[i, k]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solve Lᵀ x = b for lower-triangular L.
pub fn solve_lower_transpose(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solve A x = b given A = L Lᵀ.
pub fn solve_spd(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let y = solve_lower(l, b);
    solve_lower_transpose(l, y.view())
}

/// Inverse of a lower-triangular matrix.
///
/// O(n³); the mixture E-step amortizes this once per component per
/// iteration so whitening of the whole sample block becomes a matmul.
pub fn invert_lower(l: ArrayView2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut inv = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        inv[[j, j]] = 1.0 / l[[j, j]];
        for i in (j + 1)..n {
            let mut s = 0.0;
            for k in j..i {
                s -= l[[i, k]] * inv[[k, j]];
            }
            inv[[i, j]] = s / l[[i, i]];
        }
    }
    inv
}

/// log det A for A = L Lᵀ.
pub fn log_det_from_cholesky(l: ArrayView2<f64>) -> f64 {
    2.0 * l.diag().iter().map(|d| d.ln()).sum::<f64>()
}

/// log N(x; mean, A) with A = L Lᵀ.
pub fn mvn_log_density(x: ArrayView1<f64>, mean: ArrayView1<f64>, l: ArrayView2<f64>) -> f64 {
    let d = x.len() as f64;
    let diff = &x - &mean;
    let z = solve_lower(l, diff.view());
    let maha = z.dot(&z);
    -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + log_det_from_cholesky(l) + maha)
}
