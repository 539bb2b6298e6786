//! Dense linear-algebra helpers: jittered Cholesky and triangular solves.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Cholesky factorisation with the crate-wide jitter policy.
///
/// The factorisation is first attempted on the matrix as given. It counts as
/// failed when nalgebra rejects it or when the smallest pivot sits at
/// rounding level (squared pivot below `1e-12 * mean(diag)`), in which case
/// the triangular solves would amplify noise past any useful precision. On
/// failure, jitter is added to the diagonal starting at `1e-6 * mean(diag)`
/// and escalating by factors of 10 up to `1e-2 * mean(diag)`; if the matrix
/// still cannot be factorised a numerical error is raised.
pub fn jittered_cholesky(mat: &DMatrix<f64>, what: &str) -> Result<(Cholesky<f64, Dyn>, f64)> {
    debug_assert_eq!(mat.nrows(), mat.ncols());
    let mean_diag = mat.diagonal().mean().abs().max(f64::MIN_POSITIVE);
    let pivot_floor = 1e-12 * mean_diag;
    let well_conditioned = |chol: &Cholesky<f64, Dyn>| {
        chol.l_dirty().diagonal().iter().all(|d| d * d > pivot_floor)
    };
    if let Some(chol) = Cholesky::new(mat.clone()) {
        if well_conditioned(&chol) {
            return Ok((chol, 0.0));
        }
    }
    let mut scale = 1e-6;
    while scale <= 1e-2 {
        let jitter = scale * mean_diag;
        let mut jittered = mat.clone();
        for i in 0..mat.nrows() {
            jittered[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(jittered) {
            if well_conditioned(&chol) {
                return Ok((chol, jitter));
            }
        }
        scale *= 10.0;
    }
    Err(Error::Numerical(format!(
        "Cholesky of {what} failed after jitter escalation up to 1e-2 * mean diagonal"
    )))
}

/// Log-determinant from a Cholesky factor.
pub fn chol_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Solve `L X = B` for lower-triangular `L` of a Cholesky factor.
pub fn solve_lower(chol: &Cholesky<f64, Dyn>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut x = b.clone();
    chol.l_dirty().solve_lower_triangular_mut(&mut x);
    x
}

/// Solve `Lᵀ X = B` for the transposed Cholesky factor.
pub fn solve_lower_transpose(chol: &Cholesky<f64, Dyn>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut x = b.clone();
    chol.l_dirty().tr_solve_lower_triangular_mut(&mut x);
    x
}

/// Symmetrise in place: `a <- (a + aᵀ) / 2`.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Sum of the elementwise product, `tr(AᵀB)` for equally sized matrices.
pub fn dot_frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Log-density of `N(x | mean, chol(cov))`.
pub fn gaussian_log_density(
    x: &DVector<f64>,
    mean: &DVector<f64>,
    chol: &Cholesky<f64, Dyn>,
) -> f64 {
    let n = x.len() as f64;
    let mut d = x - mean;
    chol.l_dirty().solve_lower_triangular_mut(&mut d);
    -0.5 * n * (2.0 * std::f64::consts::PI).ln() - 0.5 * chol_log_det(chol) - 0.5 * d.norm_squared()
}
