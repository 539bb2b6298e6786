//! The trained-state container and full bound/gradient evaluation.

use nalgebra::DMatrix;

use crate::bound::{fhat_with_factors, FhatFactors, OutputData};
use crate::error::{Error, Result};
use crate::kernel::Kernel;
use crate::linalg::{chol_log_det, dot_frob, solve_lower};
use crate::psi::{contract_psi_gradients, psi_statistics, PsiStats};
use crate::variational::{
    build_temporal_cov, dynamical_transform, kl_factorized, kl_factorized_grads,
    kl_factorized_vs, DynamicalQ, DynamicalTransform, FactorizedQ, LatentPrior,
};

/// Which variant of the model this is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Static,
    Dynamical,
    UncertainInput,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Static => "static",
            Variant::Dynamical => "dynamical",
            Variant::UncertainInput => "uncertain-input",
        }
    }
}

/// The variational distribution over latent inputs.
#[derive(Debug, Clone)]
pub enum QDist {
    Factorized(FactorizedQ),
    Dynamical(DynamicalQ),
}

/// Trained state: mapping kernel, latent prior, q(X), inducing inputs,
/// noise precision and the output-data representation.
#[derive(Debug, Clone)]
pub struct Model {
    pub kernel_f: Kernel,
    pub prior: LatentPrior,
    pub q: QDist,
    pub xu: DMatrix<f64>,
    pub beta: f64,
    pub output: OutputData,
    /// Freeze the inducing inputs during optimisation.
    pub fix_xu: bool,
    /// Freeze the noise precision (warm-up stage).
    pub fix_beta: bool,
    /// Bound values at accepted optimiser steps.
    pub trace: Vec<f64>,
}

impl Model {
    pub fn new(
        kernel_f: Kernel,
        prior: LatentPrior,
        q: QDist,
        xu: DMatrix<f64>,
        beta: f64,
        output: OutputData,
    ) -> Result<Self> {
        let model = Model {
            kernel_f,
            prior,
            q,
            xu,
            beta,
            output,
            fix_xu: false,
            fix_beta: false,
            trace: Vec::new(),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::State(format!("beta must be positive, got {}", self.beta)));
        }
        let (n, q) = match &self.q {
            QDist::Factorized(f) => (f.n(), f.q()),
            QDist::Dynamical(d) => (d.n(), d.q()),
        };
        if self.xu.ncols() != q {
            return Err(Error::Argument(format!(
                "inducing inputs have {} columns, latent dimensionality is {q}",
                self.xu.ncols()
            )));
        }
        if self.output.n() != n {
            return Err(Error::Argument(format!(
                "outputs have {} rows, q(X) has {n}",
                self.output.n()
            )));
        }
        self.kernel_f.validate(q)?;
        match (&self.prior, &self.q) {
            (LatentPrior::StandardNormal, QDist::Factorized(_)) => Ok(()),
            (LatentPrior::UncertainInput { z, sigma_z }, QDist::Factorized(_)) => {
                if z.shape() != (n, q) || sigma_z.len() != q {
                    return Err(Error::Argument(
                        "uncertain-input prior shapes do not match q(X)".into(),
                    ));
                }
                Ok(())
            }
            (LatentPrior::Temporal { kernel, times, .. }, QDist::Dynamical(_)) => {
                if times.nrows() != n {
                    return Err(Error::Argument(format!(
                        "temporal prior has {} timestamps for {n} points",
                        times.nrows()
                    )));
                }
                kernel.validate(times.ncols())
            }
            _ => Err(Error::Argument(
                "prior kind does not match the variational distribution kind".into(),
            )),
        }
    }

    pub fn variant(&self) -> Variant {
        match (&self.prior, &self.q) {
            (LatentPrior::Temporal { .. }, _) => Variant::Dynamical,
            (LatentPrior::UncertainInput { .. }, _) => Variant::UncertainInput,
            _ => Variant::Static,
        }
    }

    pub fn n(&self) -> usize {
        self.output.n()
    }

    pub fn latent_dim(&self) -> usize {
        self.xu.ncols()
    }

    pub fn num_inducing(&self) -> usize {
        self.xu.nrows()
    }

    /// Per-point Gaussian marginals of q(X); for the dynamical variant this
    /// applies the reparametrisation and also returns its intermediates.
    pub fn marginals(&self) -> Result<Marginals> {
        match &self.q {
            QDist::Factorized(f) => Ok(Marginals {
                mean: f.mean.clone(),
                var: f.var.clone(),
                dynamical: None,
            }),
            QDist::Dynamical(d) => {
                let kx = self.temporal_cov()?;
                let transform = dynamical_transform(d, &kx)?;
                Ok(Marginals {
                    mean: transform.mean.clone(),
                    var: transform.svar.clone(),
                    dynamical: Some(DynParts { kx, transform }),
                })
            }
        }
    }

    /// The temporal prior covariance (dynamical variant only).
    pub fn temporal_cov(&self) -> Result<DMatrix<f64>> {
        match &self.prior {
            LatentPrior::Temporal { kernel, times, seq_starts } => {
                build_temporal_cov(kernel, times, seq_starts)
            }
            _ => Err(Error::Capability("model has no temporal prior".into())),
        }
    }

    /// KL(q(X) ‖ p(X)) for the current state.
    pub fn kl(&self) -> Result<f64> {
        match (&self.prior, &self.q) {
            (LatentPrior::StandardNormal, QDist::Factorized(f)) => Ok(kl_factorized(f)),
            (LatentPrior::UncertainInput { z, sigma_z }, QDist::Factorized(f)) => {
                Ok(kl_factorized_vs(f, z, sigma_z))
            }
            (LatentPrior::Temporal { .. }, QDist::Dynamical(d)) => {
                crate::variational::kl_dynamical(d, &self.temporal_cov()?)
            }
            _ => Err(Error::Argument("inconsistent prior / q combination".into())),
        }
    }

    /// F = F̂ − KL.
    pub fn lower_bound(&self) -> Result<f64> {
        Ok(self.bound_parts()?.value)
    }

    /// F together with its two pieces.
    pub fn bound_parts(&self) -> Result<BoundParts> {
        let marginals = self.marginals()?;
        let psi = psi_statistics(&self.kernel_f, &marginals.mean, &marginals.var, &self.xu)?;
        let kuu = self.kernel_f.matrix_self(&self.xu)?;
        let factors = fhat_with_factors(&kuu, &psi, &self.output, self.beta)?;
        let kl = match (&self.prior, &self.q) {
            (LatentPrior::StandardNormal, QDist::Factorized(f)) => kl_factorized(f),
            (LatentPrior::UncertainInput { z, sigma_z }, QDist::Factorized(f)) => {
                kl_factorized_vs(f, z, sigma_z)
            }
            (LatentPrior::Temporal { .. }, QDist::Dynamical(d)) => {
                let parts = marginals.dynamical.as_ref().unwrap();
                kl_dynamical_from_transform(d, &parts.kx, &parts.transform)
            }
            _ => return Err(Error::Argument("inconsistent prior / q combination".into())),
        };
        Ok(BoundParts { value: factors.value - kl, fhat: factors.value, kl, psi, factors })
    }
}

pub struct Marginals {
    pub mean: DMatrix<f64>,
    pub var: DMatrix<f64>,
    pub dynamical: Option<DynParts>,
}

pub struct DynParts {
    pub kx: DMatrix<f64>,
    pub transform: DynamicalTransform,
}

pub struct BoundParts {
    pub value: f64,
    pub fhat: f64,
    pub kl: f64,
    pub psi: PsiStats,
    pub factors: FhatFactors,
}

/// Dynamical KL using an already-computed transform:
/// `½ Σ_j [tr(B̃_j⁻¹) + μ̄_jᵀ Kx μ̄_j + log|B̃_j|] − nq/2`.
pub fn kl_dynamical_from_transform(
    q: &DynamicalQ,
    kx: &DMatrix<f64>,
    transform: &DynamicalTransform,
) -> f64 {
    let (n, dims) = q.mu_bar.shape();
    let eye = DMatrix::identity(n, n);
    let mut acc = 0.0;
    for j in 0..dims {
        let chol = &transform.btilde_chol[j];
        let linv = solve_lower(chol, &eye);
        let tr_binv = linv.iter().map(|v| v * v).sum::<f64>();
        let mu_bar_j = q.mu_bar.column(j).into_owned();
        let quad = (kx * &mu_bar_j).dot(&mu_bar_j);
        acc += tr_binv + quad + chol_log_det(chol);
    }
    0.5 * acc - 0.5 * (n * dims) as f64
}

/// Natural-space gradients of F with respect to every model quantity.
pub struct NaturalGradients {
    /// Means block: dF/dM (factorised) or dF/dμ̄ (dynamical).
    pub dmean: DMatrix<f64>,
    /// Variances block: dF/dS (factorised) or dF/dλ (dynamical).
    pub dvar: DMatrix<f64>,
    pub dxu: DMatrix<f64>,
    pub dtheta_f: Vec<f64>,
    pub dtheta_x: Vec<f64>,
    pub dbeta: f64,
}

/// Evaluate the bound and its analytic gradients in natural space.
pub fn bound_with_gradients(model: &Model) -> Result<(f64, NaturalGradients)> {
    let marginals = model.marginals()?;
    let psi = psi_statistics(&model.kernel_f, &marginals.mean, &marginals.var, &model.xu)?;
    let kuu = model.kernel_f.matrix_self(&model.xu)?;
    let factors = fhat_with_factors(&kuu, &psi, &model.output, model.beta)?;
    let psi_grads = contract_psi_gradients(
        &model.kernel_f,
        &marginals.mean,
        &marginals.var,
        &model.xu,
        factors.dpsi0,
        &factors.dpsi1,
        &factors.dpsi2,
    )?;
    let (dtheta_kuu, dxu_kuu) = model.kernel_f.contract_self_grad(&model.xu, &factors.dkuu, true)?;
    let dxu = &psi_grads.dxu + dxu_kuu.unwrap();
    let dtheta_f: Vec<f64> =
        psi_grads.dtheta.iter().zip(&dtheta_kuu).map(|(a, b)| a + b).collect();

    match (&model.prior, &model.q) {
        (LatentPrior::StandardNormal, QDist::Factorized(f)) => {
            let (klm, klv) = kl_factorized_grads(f, None);
            let value = factors.value - kl_factorized(f);
            Ok((
                value,
                NaturalGradients {
                    dmean: &psi_grads.dmu - klm,
                    dvar: &psi_grads.dvar - klv,
                    dxu,
                    dtheta_f,
                    dtheta_x: Vec::new(),
                    dbeta: factors.dbeta,
                },
            ))
        }
        (LatentPrior::UncertainInput { z, sigma_z }, QDist::Factorized(f)) => {
            let (klm, klv) = kl_factorized_grads(f, Some((z, sigma_z)));
            let value = factors.value - kl_factorized_vs(f, z, sigma_z);
            Ok((
                value,
                NaturalGradients {
                    dmean: &psi_grads.dmu - klm,
                    dvar: &psi_grads.dvar - klv,
                    dxu,
                    dtheta_f,
                    dtheta_x: Vec::new(),
                    dbeta: factors.dbeta,
                },
            ))
        }
        (LatentPrior::Temporal { kernel, times, seq_starts }, QDist::Dynamical(d)) => {
            let parts = marginals.dynamical.as_ref().unwrap();
            let kx = &parts.kx;
            let transform = &parts.transform;
            let kl = kl_dynamical_from_transform(d, kx, transform);
            let (dmean, dvar) =
                dynamical_chain(d, kx, transform, &psi_grads.dmu, &psi_grads.dvar);

            // Multiplier matrices for the theta_x chain rule.
            let (n, dims) = d.mu_bar.shape();
            let mut dtheta_x = vec![0.0; kernel.param_count()];
            let eye = DMatrix::identity(n, n);
            let mut theta_x_mult: Vec<DMatrix<f64>> = Vec::with_capacity(dims);
            for j in 0..dims {
                let g_j = psi_grads.dmu.column(j).into_owned();
                let ds_j = psi_grads.dvar.column(j).into_owned();
                let mu_bar_j = d.mu_bar.column(j).into_owned();
                let bhat = &transform.bhat[j];
                let ibk = &eye - bhat * kx;
                let diag_ds = DMatrix::from_diagonal(&ds_j);
                let mut mult = &ibk * &diag_ds * ibk.transpose();
                mult -= (bhat * kx * bhat + &mu_bar_j * mu_bar_j.transpose()).scale(0.5);
                mult += &mu_bar_j * g_j.transpose();
                theta_x_mult.push(mult);
            }
            for a in 0..kernel.param_count() {
                let dkx = temporal_cov_param_grad(kernel, times, seq_starts, a)?;
                for mult in &theta_x_mult {
                    dtheta_x[a] += dot_frob(mult, &dkx);
                }
            }
            Ok((
                factors.value - kl,
                NaturalGradients { dmean, dvar, dxu, dtheta_f, dtheta_x, dbeta: factors.dbeta },
            ))
        }
        _ => Err(Error::Argument("inconsistent prior / q combination".into())),
    }
}

/// Chain rule from F̂-gradients in marginal space to the reparametrised
/// dynamical coordinates, with the KL contributions folded in:
/// `dF/dμ̄_j = Kx (dF̂/dμ_j − μ̄_j)` and
/// `dF/dλ_j = −(S_j ∘ S_j)(dF̂/ds_j + λ_j / 2)`.
pub(crate) fn dynamical_chain(
    q: &DynamicalQ,
    kx: &DMatrix<f64>,
    transform: &DynamicalTransform,
    dmu_hat: &DMatrix<f64>,
    dvar_hat: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, dims) = q.mu_bar.shape();
    let mut dmean = DMatrix::zeros(n, dims);
    let mut dvar = DMatrix::zeros(n, dims);
    for j in 0..dims {
        let g_j = dmu_hat.column(j).into_owned();
        let ds_j = dvar_hat.column(j).into_owned();
        let mu_bar_j = q.mu_bar.column(j).into_owned();
        dmean.column_mut(j).copy_from(&(kx * (&g_j - &mu_bar_j)));
        let s = &transform.s_full[j];
        let target = &ds_j + q.lambda.column(j).into_owned().scale(0.5);
        let s_had = s.component_mul(s);
        dvar.column_mut(j).copy_from(&(-(&s_had * &target)));
    }
    (dmean, dvar)
}

/// Block-diagonal `∂Kx/∂θ` matching `build_temporal_cov`.
fn temporal_cov_param_grad(
    kernel: &Kernel,
    times: &DMatrix<f64>,
    seq_starts: &[usize],
    param: usize,
) -> Result<DMatrix<f64>> {
    let n = times.nrows();
    if seq_starts.len() <= 1 {
        return kernel.param_grad_matrix(times, times, param);
    }
    let mut out = DMatrix::zeros(n, n);
    let mut bounds: Vec<usize> = seq_starts.to_vec();
    bounds.push(n);
    for w in bounds.windows(2) {
        let (start, end) = (w[0], w[1]);
        let block_t = times.rows(start, end - start).into_owned();
        let block = kernel.param_grad_matrix(&block_t, &block_t, param)?;
        out.view_mut((start, start), (end - start, end - start)).copy_from(&block);
    }
    Ok(out)
}
