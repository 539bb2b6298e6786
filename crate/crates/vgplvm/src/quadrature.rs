//! Gauss–Hermite quadrature oracle for kernel expectations.
//!
//! Computes the ψ quantities by tensor-product quadrature over each Gaussian
//! marginal q(x_i). Works for any kernel family, at a cost growing as
//! `nodes^q`; intended as an independent check of the analytic ψ statistics.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::kernel::Kernel;
use crate::psi::PsiStats;

/// Nodes and weights of the physicists' Gauss–Hermite rule:
/// `∫ e^{-z²} f(z) dz ≈ Σ w_i f(z_i)`.
pub fn gauss_hermite(nodes: usize) -> (Vec<f64>, Vec<f64>) {
    // Golub-Welsch on the Jacobi matrix; off-diagonals sqrt(i/2).
    let mut jacobi = DMatrix::zeros(nodes, nodes);
    for i in 1..nodes {
        let b = (i as f64 / 2.0).sqrt();
        jacobi[(i - 1, i)] = b;
        jacobi[(i, i - 1)] = b;
    }
    let eigen = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..nodes)
        .map(|k| {
            let weight = std::f64::consts::PI.sqrt() * eigen.eigenvectors[(0, k)].powi(2);
            (eigen.eigenvalues[k], weight)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    pairs.into_iter().unzip()
}

/// ψ statistics by tensor-product Gauss–Hermite quadrature.
///
/// `mu` and `var` are the n×q means and diagonal variances of the Gaussian
/// marginals; `xu` the m×q inducing inputs. Requires `q ≤ 3` and `nodes ≥ 20`.
pub fn psi_quadrature_oracle(
    kernel: &Kernel,
    mu: &DMatrix<f64>,
    var: &DMatrix<f64>,
    xu: &DMatrix<f64>,
    nodes: usize,
) -> Result<PsiStats> {
    let (n, q) = mu.shape();
    let m = xu.nrows();
    if q > 3 {
        return Err(Error::Capability(format!(
            "quadrature oracle cost grows as nodes^q; q = {q} > 3"
        )));
    }
    if nodes < 20 {
        return Err(Error::Argument(format!("need at least 20 nodes, got {nodes}")));
    }
    if var.shape() != (n, q) || xu.ncols() != q {
        return Err(Error::Argument("inconsistent shapes for quadrature oracle".into()));
    }
    kernel.validate(q)?;

    let (z, w) = gauss_hermite(nodes);
    let norm = std::f64::consts::PI.sqrt().powi(q as i32);
    let xu_rows: Vec<Vec<f64>> = (0..m).map(|k| xu.row(k).iter().copied().collect()).collect();

    let mut psi0 = 0.0;
    let mut psi1 = DMatrix::zeros(n, m);
    let mut psi2 = DMatrix::zeros(m, m);

    let mut grid = vec![0usize; q];
    let mut point = vec![0.0; q];
    let mut kvals = vec![0.0; m];
    for i in 0..n {
        loop {
            let mut weight = 1.0;
            for (d, &g) in grid.iter().enumerate() {
                weight *= w[g];
                point[d] = mu[(i, d)] + (2.0 * var[(i, d)]).sqrt() * z[g];
            }
            weight /= norm;

            psi0 += weight
                * kernel
                    .terms
                    .iter()
                    .map(|t| t.eval(&point, &point, true))
                    .sum::<f64>();
            for (k, u) in xu_rows.iter().enumerate() {
                kvals[k] = kernel
                    .terms
                    .iter()
                    .map(|t| t.eval(&point, u, false))
                    .sum::<f64>();
            }
            for k in 0..m {
                psi1[(i, k)] += weight * kvals[k];
                for kp in 0..m {
                    psi2[(k, kp)] += weight * kvals[k] * kvals[kp];
                }
            }

            // Advance the tensor-product grid index.
            let mut d = 0;
            loop {
                if d == q {
                    break;
                }
                grid[d] += 1;
                if grid[d] < nodes {
                    break;
                }
                grid[d] = 0;
                d += 1;
            }
            if d == q {
                break;
            }
        }
    }
    Ok(PsiStats { psi0, psi1, psi2, per_point: None })
}
