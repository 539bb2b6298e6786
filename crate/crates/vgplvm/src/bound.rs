//! The evidence lower bound F = F̂ − KL and its gradient factors.
//!
//! F̂ is evaluated in the p-summed form where the data enter only through
//! the Gram matrix YYᵀ, represented by a factor R with R Rᵀ = YYᵀ. With
//! A = σ²K_uu + Ψ2 and Φ = L⁻¹ Ψ2 L⁻ᵀ (L the Cholesky factor of K_uu):
//!
//! F̂ = p [ (n−m)/2 ln β − n/2 ln 2π − ½ ln|σ²I + Φ| − β/2 ψ0 + β/2 tr Φ ]
//!     − β/2 tr(YYᵀ) + β/2 tr(A⁻¹ Ψ1ᵀ YYᵀ Ψ1).
//!
//! Only K_uu ever needs jitter: σ²I + Φ has eigenvalues bounded below by σ².

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{
    chol_log_det, jittered_cholesky, solve_lower, solve_lower_transpose, symmetrize,
};
use crate::psi::PsiStats;

/// Output-data representation: column count, trace of YYᵀ and a factor of
/// the Gram matrix. Raw outputs are kept only when a caller needs them
/// (reconstruction, density ratios).
#[derive(Debug, Clone)]
pub struct OutputData {
    p: usize,
    trace_yy: f64,
    factor: DMatrix<f64>,
    raw: bool,
}

impl OutputData {
    /// Build from raw outputs, which are retained (Y is itself a factor of
    /// YYᵀ).
    pub fn from_raw(y: DMatrix<f64>) -> Self {
        let trace_yy = y.iter().map(|v| v * v).sum();
        OutputData { p: y.ncols(), trace_yy, factor: y, raw: true }
    }

    /// Build from the n×n Gram matrix YYᵀ alone. The factor is obtained by
    /// symmetric eigendecomposition, truncated to at most `p` columns.
    pub fn from_gram(gram: DMatrix<f64>, p: usize) -> Result<Self> {
        if gram.nrows() != gram.ncols() {
            return Err(Error::Argument("gram matrix must be square".into()));
        }
        let n = gram.nrows();
        let eig = nalgebra::SymmetricEigen::new(gram.clone());
        let max_eig = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
        if eig.eigenvalues.iter().any(|e| *e < -1e-8 * max_eig.max(1.0)) {
            return Err(Error::Argument("gram matrix is not positive semidefinite".into()));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|a, b| eig.eigenvalues[*b].partial_cmp(&eig.eigenvalues[*a]).unwrap());
        let rank = order
            .iter()
            .take(p.min(n))
            .filter(|&&k| eig.eigenvalues[k] > 1e-12 * max_eig.max(1.0))
            .count()
            .max(1);
        let mut factor = DMatrix::zeros(n, rank);
        for (col, &k) in order.iter().take(rank).enumerate() {
            let scale = eig.eigenvalues[k].max(0.0).sqrt();
            factor.column_mut(col).copy_from(&(eig.eigenvectors.column(k) * scale));
        }
        let trace_yy = gram.trace();
        Ok(OutputData { p, trace_yy, factor, raw: false })
    }

    /// Drop the raw outputs, keeping only the factor representation.
    pub fn strip_raw(&mut self) {
        self.raw = false;
    }

    pub fn n(&self) -> usize {
        self.factor.nrows()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn trace_yy(&self) -> f64 {
        self.trace_yy
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// Raw outputs if they were retained.
    pub fn raw(&self) -> Option<&DMatrix<f64>> {
        if self.raw {
            Some(&self.factor)
        } else {
            None
        }
    }
}

/// F̂ value plus the factors needed to chain gradients through the ψ
/// statistics, K_uu and β. `dpsi2` and `dkuu` are symmetric.
#[derive(Debug, Clone)]
pub struct FhatFactors {
    pub value: f64,
    pub dpsi0: f64,
    pub dpsi1: DMatrix<f64>,
    pub dpsi2: DMatrix<f64>,
    pub dkuu: DMatrix<f64>,
    pub dbeta: f64,
    /// `B = A⁻¹ Ψ1ᵀ Y`, the posterior mean weights of q(U); present only
    /// when the output data retain raw values.
    pub b_weights: Option<DMatrix<f64>>,
    /// `K_uu⁻¹ − σ² A⁻¹`, used by predictive covariances.
    pub kuu_inv_minus_sigma2_ainv: DMatrix<f64>,
}

/// Evaluate F̂ only.
pub fn fhat(kuu: &DMatrix<f64>, psi: &PsiStats, output: &OutputData, beta: f64) -> Result<f64> {
    Ok(fhat_with_factors(kuu, psi, output, beta)?.value)
}

/// Evaluate F̂ together with its gradient factors.
pub fn fhat_with_factors(
    kuu: &DMatrix<f64>,
    psi: &PsiStats,
    output: &OutputData,
    beta: f64,
) -> Result<FhatFactors> {
    if !(beta > 0.0) {
        return Err(Error::State(format!("beta must be strictly positive, got {beta}")));
    }
    let n = psi.psi1.nrows();
    let m = kuu.nrows();
    if output.n() != n || psi.psi2.nrows() != m {
        return Err(Error::Argument(format!(
            "inconsistent shapes: psi1 {:?}, psi2 {:?}, kuu {:?}, outputs n={}",
            psi.psi1.shape(),
            psi.psi2.shape(),
            kuu.shape(),
            output.n()
        )));
    }
    let p = output.p() as f64;
    let sigma2 = 1.0 / beta;

    let (lu, _jitter) = jittered_cholesky(kuu, "Kuu")?;
    // Phi = L^-1 Psi2 L^-T.
    let half = solve_lower(&lu, &psi.psi2);
    let mut phi = solve_lower(&lu, &half.transpose()).transpose();
    symmetrize(&mut phi);
    let tr_phi = phi.trace();

    let mut bmat = phi.clone();
    for i in 0..m {
        bmat[(i, i)] += sigma2;
    }
    let (lb, _) = jittered_cholesky(&bmat, "sigma^2 I + Phi")?;
    let log_det_b = chol_log_det(&lb);

    // M1 = Psi1ᵀ R; E = Lb^-1 L^-1 M1.
    let m1 = psi.psi1.transpose() * output.factor();
    let c = solve_lower(&lu, &m1);
    let e = solve_lower(&lb, &c);
    let quad = e.iter().map(|v| v * v).sum::<f64>();

    let nf = n as f64;
    let mf = m as f64;
    let value = p
        * (0.5 * (nf - mf) * beta.ln()
            - 0.5 * nf * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * log_det_b
            - 0.5 * beta * psi.psi0
            + 0.5 * beta * tr_phi)
        - 0.5 * beta * output.trace_yy()
        + 0.5 * beta * quad;

    // Gradient factors.
    let eye = DMatrix::identity(m, m);
    let lu_inv = solve_lower(&lu, &eye);
    let w1 = solve_lower(&lb, &lu_inv); // Lb^-1 L^-1
    let mut ainv = w1.transpose() * &w1;
    symmetrize(&mut ainv);
    let mut kuu_inv = lu_inv.transpose() * &lu_inv;
    symmetrize(&mut kuu_inv);
    let ainv_m1 = w1.transpose() * &e; // A^-1 M1
    let c1 = &ainv_m1 * ainv_m1.transpose();

    let mut dpsi2 = (&kuu_inv * p - &ainv * (p * sigma2) - &c1) * (0.5 * beta);
    symmetrize(&mut dpsi2);
    let dpsi1 = output.factor() * (ainv_m1.transpose() * beta);
    let dpsi0 = -0.5 * p * beta;

    // Kuu^-1 Psi2 Kuu^-1 = Linv^T Phi Linv.
    let kpk = lu_inv.transpose() * &phi * &lu_inv;
    let mut dkuu = (&kuu_inv * p - &ainv * (p * sigma2) - &c1 - &kpk * (p * beta)) * 0.5;
    symmetrize(&mut dkuu);

    let lb_inv = solve_lower(&lb, &eye);
    let tr_kuu_ainv = lb_inv.iter().map(|v| v * v).sum::<f64>();
    let g = solve_lower_transpose(&lb, &e);
    let tr_quad_beta = g.iter().map(|v| v * v).sum::<f64>();
    let dbeta = 0.5
        * (p * ((nf - mf) * sigma2 + tr_phi - psi.psi0) - output.trace_yy() + quad
            + p * sigma2 * sigma2 * tr_kuu_ainv
            + sigma2 * tr_quad_beta);

    let b_weights = output.raw().map(|y| {
        let m1y = psi.psi1.transpose() * y;
        let cy = solve_lower(&lu, &m1y);
        let ey = solve_lower(&lb, &cy);
        w1.transpose() * ey
    });
    let kuu_inv_minus_sigma2_ainv = &kuu_inv - &ainv * sigma2;

    Ok(FhatFactors {
        value,
        dpsi0,
        dpsi1,
        dpsi2,
        dkuu,
        dbeta,
        b_weights,
        kuu_inv_minus_sigma2_ainv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Kernel;
    use crate::psi::psi_statistics;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn exact_gp_log_marginal(
        kernel: &Kernel,
        x: &DMatrix<f64>,
        y: &DMatrix<f64>,
        sigma2: f64,
    ) -> f64 {
        let n = x.nrows();
        let mut k = kernel.matrix_self(x).unwrap();
        for i in 0..n {
            k[(i, i)] += sigma2;
        }
        let (chol, _) = jittered_cholesky(&k, "Kff + noise").unwrap();
        let ld = chol_log_det(&chol);
        let mut total = 0.0;
        for j in 0..y.ncols() {
            let mut v = y.column(j).into_owned();
            chol.l_dirty().solve_lower_triangular_mut(&mut v);
            total += -0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * ld
                - 0.5 * v.norm_squared();
        }
        total
    }

    /// With Xu = X and near-delta q(X), the bound collapses to the exact GP
    /// log marginal likelihood.
    #[test]
    fn collapses_to_exact_gp_marginal() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 15;
        let q = 2;
        let kernel = Kernel::rbf_ard(1.4, &[0.9, 0.6]);
        let x = DMatrix::from_fn(n, q, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        let y = DMatrix::from_fn(n, 3, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        let sigma2 = 0.1;
        let beta = 1.0 / sigma2;

        let var = DMatrix::repeat(n, q, 1e-12);
        let psi = psi_statistics(&kernel, &x, &var, &x).unwrap();
        let kuu = kernel.matrix_self(&x).unwrap();
        let output = OutputData::from_raw(y.clone());
        let bound = fhat(&kuu, &psi, &output, beta).unwrap();
        let exact = exact_gp_log_marginal(&kernel, &x, &y, sigma2);
        assert!(
            (bound - exact).abs() / exact.abs() < 1e-4,
            "bound {bound} vs exact {exact}"
        );
        // It is a lower bound.
        assert!(bound <= exact + 1e-8);
    }

    #[test]
    fn zero_outputs_leave_only_data_independent_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let kernel = Kernel::rbf_ard(1.0, &[1.0]);
        let mu = DMatrix::from_fn(6, 1, |_, _| rng.gen::<f64>());
        let var = DMatrix::repeat(6, 1, 0.3);
        let xu = DMatrix::from_fn(3, 1, |_, _| rng.gen::<f64>());
        let psi = psi_statistics(&kernel, &mu, &var, &xu).unwrap();
        let kuu = kernel.matrix_self(&xu).unwrap();
        let beta = 2.0;

        let zeros = OutputData::from_raw(DMatrix::zeros(6, 2));
        let factors = fhat_with_factors(&kuu, &psi, &zeros, beta).unwrap();
        // The quadratic term vanishes; recompute the data-independent terms.
        let (lu, _) = jittered_cholesky(&kuu, "kuu").unwrap();
        let half = solve_lower(&lu, &psi.psi2);
        let phi = solve_lower(&lu, &half.transpose()).transpose();
        let mut bmat = phi.clone();
        for i in 0..3 {
            bmat[(i, i)] += 1.0 / beta;
        }
        let (lb, _) = jittered_cholesky(&bmat, "b").unwrap();
        let expected = 2.0
            * (0.5 * (6.0 - 3.0) * beta.ln() - 3.0 * (2.0 * std::f64::consts::PI).ln()
                - 0.5 * chol_log_det(&lb)
                - 0.5 * beta * psi.psi0
                + 0.5 * beta * phi.trace());
        assert!((factors.value - expected).abs() < 1e-10);
    }

    #[test]
    fn raw_and_gram_representations_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let kernel = Kernel::rbf_ard(0.8, &[1.1, 0.5]);
        let n = 9;
        let mu = DMatrix::from_fn(n, 2, |_, _| rng.gen::<f64>() - 0.5);
        let var = DMatrix::from_fn(n, 2, |_, _| 0.1 + rng.gen::<f64>());
        let xu = DMatrix::from_fn(4, 2, |_, _| rng.gen::<f64>() - 0.5);
        let psi = psi_statistics(&kernel, &mu, &var, &xu).unwrap();
        let kuu = kernel.matrix_self(&xu).unwrap();
        let y = DMatrix::from_fn(n, 5, |_, _| rng.gen::<f64>() - 0.5);
        let beta = 3.0;

        let from_raw = fhat(&kuu, &psi, &OutputData::from_raw(y.clone()), beta).unwrap();
        let gram = &y * y.transpose();
        let from_gram =
            fhat(&kuu, &psi, &OutputData::from_gram(gram, 5).unwrap(), beta).unwrap();
        assert!(
            (from_raw - from_gram).abs() / from_raw.abs() < 1e-12,
            "raw {from_raw} vs gram {from_gram}"
        );
    }

    #[test]
    fn invariant_to_orthogonal_output_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let kernel = Kernel::rbf_ard(1.0, &[0.7]);
        let n = 7;
        let mu = DMatrix::from_fn(n, 1, |_, _| rng.gen::<f64>() - 0.5);
        let var = DMatrix::repeat(n, 1, 0.4);
        let xu = DMatrix::from_fn(3, 1, |_, _| rng.gen::<f64>() - 0.5);
        let psi = psi_statistics(&kernel, &mu, &var, &xu).unwrap();
        let kuu = kernel.matrix_self(&xu).unwrap();
        let y = DMatrix::from_fn(n, 3, |_, _| rng.gen::<f64>() - 0.5);
        // Orthogonalise a random 3x3 matrix by QR.
        let a = DMatrix::from_fn(3, 3, |_, _| rng.gen::<f64>() - 0.5);
        let qr = a.qr();
        let rot = qr.q();
        let y_rot = &y * &rot;
        let f1 = fhat(&kuu, &psi, &OutputData::from_raw(y), 2.5).unwrap();
        let f2 = fhat(&kuu, &psi, &OutputData::from_raw(y_rot), 2.5).unwrap();
        assert!((f1 - f2).abs() / f1.abs() < 1e-12);
    }

    /// Finite-difference check of the factor matrices through direct
    /// perturbation of psi statistics, Kuu and beta.
    #[test]
    fn factor_matrices_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let kernel = Kernel::rbf_ard(1.2, &[0.8, 1.3]);
        let n = 8;
        let m = 4;
        let mu = DMatrix::from_fn(n, 2, |_, _| rng.gen::<f64>() - 0.5);
        let var = DMatrix::from_fn(n, 2, |_, _| 0.2 + rng.gen::<f64>());
        let xu = DMatrix::from_fn(m, 2, |_, _| rng.gen::<f64>() - 0.5);
        let mut psi = psi_statistics(&kernel, &mu, &var, &xu).unwrap();
        let kuu = kernel.matrix_self(&xu).unwrap();
        let y = DMatrix::from_fn(n, 3, |_, _| rng.gen::<f64>() - 0.5);
        let output = OutputData::from_raw(y);
        let beta = 1.7;

        let factors = fhat_with_factors(&kuu, &psi, &output, beta).unwrap();
        let h = 1e-6;

        // dpsi0
        psi.psi0 += h;
        let fp = fhat(&kuu, &psi, &output, beta).unwrap();
        psi.psi0 -= 2.0 * h;
        let fm = fhat(&kuu, &psi, &output, beta).unwrap();
        psi.psi0 += h;
        assert!((factors.dpsi0 - (fp - fm) / (2.0 * h)).abs() < 1e-6);

        // dpsi1 entries
        for i in [0usize, 3] {
            for k in 0..m {
                psi.psi1[(i, k)] += h;
                let fp = fhat(&kuu, &psi, &output, beta).unwrap();
                psi.psi1[(i, k)] -= 2.0 * h;
                let fm = fhat(&kuu, &psi, &output, beta).unwrap();
                psi.psi1[(i, k)] += h;
                let fd = (fp - fm) / (2.0 * h);
                assert!(
                    (factors.dpsi1[(i, k)] - fd).abs() / fd.abs().max(1e-3) < 1e-5,
                    "dpsi1[{i},{k}] {} vs {fd}",
                    factors.dpsi1[(i, k)]
                );
            }
        }

        // dpsi2 entries (perturb symmetrically).
        for k in 0..m {
            for kp in k..m {
                let delta = if k == kp { h } else { 0.5 * h };
                psi.psi2[(k, kp)] += delta;
                psi.psi2[(kp, k)] = psi.psi2[(k, kp)];
                let fp = fhat(&kuu, &psi, &output, beta).unwrap();
                psi.psi2[(k, kp)] -= 2.0 * delta;
                psi.psi2[(kp, k)] = psi.psi2[(k, kp)];
                let fm = fhat(&kuu, &psi, &output, beta).unwrap();
                psi.psi2[(k, kp)] += delta;
                psi.psi2[(kp, k)] = psi.psi2[(k, kp)];
                let fd = (fp - fm) / (2.0 * h);
                let analytic = if k == kp {
                    factors.dpsi2[(k, k)]
                } else {
                    factors.dpsi2[(k, kp)]
                };
                assert!(
                    (analytic - fd).abs() / fd.abs().max(1e-3) < 1e-5,
                    "dpsi2[{k},{kp}] {analytic} vs {fd}"
                );
            }
        }

        // dkuu entries (symmetric perturbation).
        let mut kuu_pert = kuu.clone();
        for k in 0..m {
            for kp in k..m {
                let delta = if k == kp { h } else { 0.5 * h };
                kuu_pert[(k, kp)] += delta;
                kuu_pert[(kp, k)] = kuu_pert[(k, kp)];
                let fp = fhat(&kuu_pert, &psi, &output, beta).unwrap();
                kuu_pert[(k, kp)] -= 2.0 * delta;
                kuu_pert[(kp, k)] = kuu_pert[(k, kp)];
                let fm = fhat(&kuu_pert, &psi, &output, beta).unwrap();
                kuu_pert[(k, kp)] += delta;
                kuu_pert[(kp, k)] = kuu_pert[(k, kp)];
                let fd = (fp - fm) / (2.0 * h);
                let analytic = if k == kp {
                    factors.dkuu[(k, k)]
                } else {
                    factors.dkuu[(k, kp)]
                };
                assert!(
                    (analytic - fd).abs() / fd.abs().max(1e-3) < 1e-5,
                    "dkuu[{k},{kp}] {analytic} vs {fd}"
                );
            }
        }

        // dbeta
        let fp = fhat(&kuu, &psi, &output, beta + h).unwrap();
        let fm = fhat(&kuu, &psi, &output, beta - h).unwrap();
        let fd = (fp - fm) / (2.0 * h);
        assert!(
            (factors.dbeta - fd).abs() / fd.abs().max(1e-3) < 1e-5,
            "dbeta {} vs {fd}",
            factors.dbeta
        );
    }
}
