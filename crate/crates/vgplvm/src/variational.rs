//! Representations of q(X), the latent-space priors, and their KL terms.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};
use crate::kernel::Kernel;
use crate::linalg::{chol_log_det, jittered_cholesky, solve_lower, symmetrize};

/// Factorised q(X): one independent Gaussian per data point with diagonal
/// covariance. Entries can be clamped via the fixed masks (used by the
/// semi-supervised algorithm); fixed entries receive zero gradient.
#[derive(Debug, Clone)]
pub struct FactorizedQ {
    pub mean: DMatrix<f64>,
    pub var: DMatrix<f64>,
    pub fixed_mean: Option<Vec<bool>>,
    pub fixed_var: Option<Vec<bool>>,
}

impl FactorizedQ {
    pub fn new(mean: DMatrix<f64>, var: DMatrix<f64>) -> Result<Self> {
        if mean.shape() != var.shape() {
            return Err(Error::Argument("mean and variance shapes differ".into()));
        }
        if var.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::State("q(X) variances must be strictly positive".into()));
        }
        Ok(FactorizedQ { mean, var, fixed_mean: None, fixed_var: None })
    }

    pub fn n(&self) -> usize {
        self.mean.nrows()
    }

    pub fn q(&self) -> usize {
        self.mean.ncols()
    }
}

/// Reparametrised q(X) for the dynamical variant: per latent dimension j,
/// `S_j = (Kx⁻¹ + diag(λ_j))⁻¹` and `μ_j = Kx μ̄_j`.
#[derive(Debug, Clone)]
pub struct DynamicalQ {
    pub mu_bar: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
}

impl DynamicalQ {
    pub fn new(mu_bar: DMatrix<f64>, lambda: DMatrix<f64>) -> Result<Self> {
        if mu_bar.shape() != lambda.shape() {
            return Err(Error::Argument("mu_bar and lambda shapes differ".into()));
        }
        if lambda.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::State("lambda entries must be strictly positive".into()));
        }
        Ok(DynamicalQ { mu_bar, lambda })
    }

    pub fn n(&self) -> usize {
        self.mu_bar.nrows()
    }

    pub fn q(&self) -> usize {
        self.mu_bar.ncols()
    }
}

/// Prior over the latent inputs.
#[derive(Debug, Clone)]
pub enum LatentPrior {
    /// i.i.d. standard normal rows.
    StandardNormal,
    /// Independent temporal GPs per latent dimension, block-diagonal over
    /// sequences.
    Temporal { kernel: Kernel, times: DMatrix<f64>, seq_starts: Vec<usize> },
    /// Observed noisy inputs: `p(x_i) = N(z_i, diag(sigma_z))`.
    UncertainInput { z: DMatrix<f64>, sigma_z: Vec<f64> },
}

impl LatentPrior {
    pub fn uncertain(z: DMatrix<f64>, sigma_z: Vec<f64>) -> Result<Self> {
        if sigma_z.len() != z.ncols() {
            return Err(Error::Argument("sigma_z length must match input columns".into()));
        }
        if sigma_z.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::State("sigma_z entries must be strictly positive".into()));
        }
        Ok(LatentPrior::UncertainInput { z, sigma_z })
    }
}

/// Build the temporal prior covariance, block-diagonal over sequences.
/// `seq_starts` holds the first index of every sequence and must begin at 0.
pub fn build_temporal_cov(
    kernel: &Kernel,
    times: &DMatrix<f64>,
    seq_starts: &[usize],
) -> Result<DMatrix<f64>> {
    let n = times.nrows();
    if seq_starts.is_empty() || seq_starts[0] != 0 {
        return Err(Error::Argument("sequence starts must begin with index 0".into()));
    }
    if seq_starts.windows(2).any(|w| w[1] <= w[0]) || *seq_starts.last().unwrap() >= n {
        return Err(Error::Argument("sequence starts must be increasing and < n".into()));
    }
    if seq_starts.len() == 1 {
        return kernel.matrix_self(times);
    }
    let mut kx = DMatrix::zeros(n, n);
    let mut bounds: Vec<usize> = seq_starts.to_vec();
    bounds.push(n);
    for w in bounds.windows(2) {
        let (start, end) = (w[0], w[1]);
        let block_t = times.rows(start, end - start).into_owned();
        let block = kernel.matrix_self(&block_t)?;
        kx.view_mut((start, start), (end - start, end - start)).copy_from(&block);
    }
    Ok(kx)
}

/// KL(q ‖ N(0, I)) for a factorised q (Gaussian per point, diagonal S).
pub fn kl_factorized(q: &FactorizedQ) -> f64 {
    let nq = (q.n() * q.q()) as f64;
    let mut acc = 0.0;
    for (m, s) in q.mean.iter().zip(q.var.iter()) {
        acc += m * m + s - s.ln();
    }
    0.5 * acc - 0.5 * nq
}

/// KL(q ‖ Π_i N(z_i, diag(sigma_z))) for a factorised q against the
/// uncertain-input prior.
pub fn kl_factorized_vs(q: &FactorizedQ, z: &DMatrix<f64>, sigma_z: &[f64]) -> f64 {
    let (n, dims) = q.mean.shape();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..dims {
            let sz = sigma_z[j];
            let d = q.mean[(i, j)] - z[(i, j)];
            let s = q.var[(i, j)];
            acc += (s + d * d) / sz + sz.ln() - s.ln() - 1.0;
        }
    }
    0.5 * acc
}

/// Gradients of the factorised/uncertain KL with respect to means and
/// variances. For the standard-normal prior pass `None`.
pub fn kl_factorized_grads(
    q: &FactorizedQ,
    prior: Option<(&DMatrix<f64>, &[f64])>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, dims) = q.mean.shape();
    let mut dmean = DMatrix::zeros(n, dims);
    let mut dvar = DMatrix::zeros(n, dims);
    for i in 0..n {
        for j in 0..dims {
            let (z, sz) = match prior {
                Some((z, sigma)) => (z[(i, j)], sigma[j]),
                None => (0.0, 1.0),
            };
            dmean[(i, j)] = (q.mean[(i, j)] - z) / sz;
            dvar[(i, j)] = 0.5 * (1.0 / sz - 1.0 / q.var[(i, j)]);
        }
    }
    (dmean, dvar)
}

/// The per-dimension pieces of the dynamical reparametrisation, computed via
/// the stable form `B̃_j = I + Λ_j^{1/2} Kx Λ_j^{1/2}` whose eigenvalues are
/// bounded below by one.
pub struct DynamicalTransform {
    /// μ = Kx μ̄, n×q.
    pub mean: DMatrix<f64>,
    /// Diagonals of the S_j, n×q.
    pub svar: DMatrix<f64>,
    /// Full S_j per latent dimension.
    pub s_full: Vec<DMatrix<f64>>,
    /// `B̂_j = Λ^{1/2} B̃⁻¹ Λ^{1/2} = (Kx + Λ⁻¹)⁻¹` per latent dimension.
    pub bhat: Vec<DMatrix<f64>>,
    /// Cholesky factors of the B̃_j.
    pub btilde_chol: Vec<Cholesky<f64, Dyn>>,
}

pub fn dynamical_transform(q: &DynamicalQ, kx: &DMatrix<f64>) -> Result<DynamicalTransform> {
    let (n, dims) = q.mu_bar.shape();
    if kx.nrows() != n || kx.ncols() != n {
        return Err(Error::Argument(format!(
            "temporal covariance is {}x{}, expected {n}x{n}",
            kx.nrows(),
            kx.ncols()
        )));
    }
    let mean = kx * &q.mu_bar;
    let mut svar = DMatrix::zeros(n, dims);
    let mut s_full = Vec::with_capacity(dims);
    let mut bhats = Vec::with_capacity(dims);
    let mut chols = Vec::with_capacity(dims);
    for j in 0..dims {
        let sqrt_lambda: Vec<f64> = (0..n).map(|i| q.lambda[(i, j)].sqrt()).collect();
        let mut btilde = DMatrix::from_fn(n, n, |r, c| sqrt_lambda[r] * kx[(r, c)] * sqrt_lambda[c]);
        for i in 0..n {
            btilde[(i, i)] += 1.0;
        }
        let (chol, _) = jittered_cholesky(&btilde, "Btilde")?;
        let mut binv = DMatrix::identity(n, n);
        chol.solve_mut(&mut binv);
        let bhat = DMatrix::from_fn(n, n, |r, c| sqrt_lambda[r] * binv[(r, c)] * sqrt_lambda[c]);
        let mut s = kx - kx * &bhat * kx;
        symmetrize(&mut s);
        for i in 0..n {
            svar[(i, j)] = s[(i, i)];
        }
        s_full.push(s);
        bhats.push(bhat);
        chols.push(chol);
    }
    Ok(DynamicalTransform { mean, svar, s_full, bhat: bhats, btilde_chol: chols })
}

/// KL(q(X) ‖ p(X | t)) for the dynamical variant, in the reparametrised form
/// `½ Σ_j [tr(B̃_j⁻¹) + μ̄_jᵀ Kx μ̄_j + log|B̃_j|] − nq/2`.
pub fn kl_dynamical(q: &DynamicalQ, kx: &DMatrix<f64>) -> Result<f64> {
    let (n, dims) = q.mu_bar.shape();
    let transform = dynamical_transform(q, kx)?;
    let mut acc = 0.0;
    for j in 0..dims {
        let chol = &transform.btilde_chol[j];
        let linv = solve_lower(chol, &DMatrix::identity(n, n));
        let tr_binv = linv.iter().map(|v| v * v).sum::<f64>();
        let mu_bar_j = q.mu_bar.column(j);
        let quad = (kx * mu_bar_j).dot(&mu_bar_j.into_owned());
        acc += tr_binv + quad + chol_log_det(chol);
    }
    Ok(0.5 * acc - 0.5 * (n * dims) as f64)
}
