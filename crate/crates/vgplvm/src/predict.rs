//! Test-time machinery: density ratios, partial-output reconstruction,
//! forecasting, and uncertainty-propagating auto-regression.

use nalgebra::{DMatrix, DVector};

use crate::bound::{fhat_with_factors, OutputData};
use crate::error::{Error, Result};
use crate::linalg::jittered_cholesky;
use crate::model::{dynamical_chain, kl_dynamical_from_transform, Model, QDist, Variant};
use crate::optim::{minimize, OptimOptions};
use crate::psi::{contract_psi_gradients, psi_statistics, psi_statistics_with_partials};
use crate::variational::{
    build_temporal_cov, dynamical_transform, kl_factorized, kl_factorized_grads, DynamicalQ,
    FactorizedQ, LatentPrior,
};

/// Options for the test-time q(X*) optimisation.
#[derive(Debug, Clone)]
pub struct PredictConfig {
    pub iters: usize,
    pub init_variance: f64,
    pub grad_tol: f64,
    /// Dynamical models: optimise the full coupled q(X, X*). When false, the
    /// factorised approximation keeps the training part fixed and treats the
    /// test points as an independent sequence.
    pub coupled_dynamical: bool,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig { iters: 200, init_variance: 0.5, grad_tol: 1e-6, coupled_dynamical: true }
    }
}

/// Gaussian marginals of q(X*).
#[derive(Debug, Clone)]
pub struct TestQ {
    pub mean: DMatrix<f64>,
    pub var: DMatrix<f64>,
}

/// Predictive output moments; per-point, per-column variances.
#[derive(Debug, Clone)]
pub struct PredictiveMoments {
    pub mean: DMatrix<f64>,
    pub var: DMatrix<f64>,
    pub noise_included: bool,
}

/// Posterior weights of q(U): `B = A⁻¹ Ψ1ᵀ Y` over the selected output
/// columns and the covariance correction `D = K_uu⁻¹ − σ² A⁻¹`.
#[derive(Debug, Clone)]
pub struct PosteriorWeights {
    pub b: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

fn select_columns(y: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(y.nrows(), cols.len(), |i, j| y[(i, cols[j])])
}

fn stack_rows(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    debug_assert_eq!(a.ncols(), b.ncols());
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.rows_mut(0, a.nrows()).copy_from(a);
    out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    out
}

/// Compute the posterior weights from the model's current state, restricted
/// to `columns` when given.
pub fn posterior_weights(model: &Model, columns: Option<&[usize]>) -> Result<PosteriorWeights> {
    let y = model.output.raw().ok_or_else(|| {
        Error::Capability("model output was stored without raw values; predictions need them".into())
    })?;
    let y_sel = match columns {
        Some(cols) => select_columns(y, cols),
        None => y.clone(),
    };
    let marg = model.marginals()?;
    let psi = psi_statistics(&model.kernel_f, &marg.mean, &marg.var, &model.xu)?;
    let kuu = model.kernel_f.matrix_self(&model.xu)?;
    let factors = fhat_with_factors(&kuu, &psi, &OutputData::from_raw(y_sel), model.beta)?;
    Ok(PosteriorWeights {
        b: factors.b_weights.expect("raw outputs were provided"),
        d: factors.kuu_inv_minus_sigma2_ainv,
    })
}

/// Predictive mean and per-column variance under Gaussian input uncertainty:
/// `E[F*] = Ψ1*ᵀ B` and, per test point,
/// `Cov(F*) = Bᵀ(Ψ2*ⁱ − Ψ1*ᵢ Ψ1*ᵢᵀ)B + (ψ0*ⁱ − tr(D Ψ2*ⁱ)) I`.
pub fn uncertain_input_moments(
    model: &Model,
    weights: &PosteriorWeights,
    testq: &TestQ,
    include_noise: bool,
) -> Result<PredictiveMoments> {
    let psi = psi_statistics_with_partials(&model.kernel_f, &testq.mean, &testq.var, &model.xu)?;
    let partials = psi.per_point.as_ref().expect("partials requested");
    let n_star = testq.mean.nrows();
    let p_sel = weights.b.ncols();
    let sigma2 = 1.0 / model.beta;
    let mut mean = DMatrix::zeros(n_star, p_sel);
    let mut var = DMatrix::zeros(n_star, p_sel);
    for i in 0..n_star {
        let psi1_i = psi.psi1.row(i).transpose();
        let mean_i = weights.b.transpose() * &psi1_i;
        mean.row_mut(i).copy_from(&mean_i.transpose());
        let inner = &partials.psi2[i] - &psi1_i * psi1_i.transpose();
        let common = partials.psi0[i] - crate::linalg::dot_frob(&weights.d, &partials.psi2[i]);
        let t = &inner * &weights.b;
        for j in 0..p_sel {
            let quad = weights.b.column(j).dot(&t.column(j));
            let mut v = quad + common;
            if include_noise {
                v += sigma2;
            }
            var[(i, j)] = v.max(0.0);
        }
    }
    Ok(PredictiveMoments { mean, var, noise_included: include_noise })
}

/// GP-regression-style prediction at known test inputs (zero or fixed input
/// variance), over all output columns.
pub fn predict_at_inputs(model: &Model, testq: &TestQ, include_noise: bool) -> Result<PredictiveMoments> {
    let weights = posterior_weights(model, None)?;
    uncertain_input_moments(model, &weights, testq, include_noise)
}

/// Nearest-neighbour initialisation of q(X*): for each test row, the
/// training row closest in the (standardised) observed output columns.
fn nearest_neighbour_init(
    model: &Model,
    ystar: &DMatrix<f64>,
    columns: Option<&[usize]>,
) -> Result<TestQ> {
    let y = model.output.raw().ok_or_else(|| {
        Error::Capability("nearest-neighbour initialisation needs raw training outputs".into())
    })?;
    let cols: Vec<usize> = match columns {
        Some(c) => c.to_vec(),
        None => (0..y.ncols()).collect(),
    };
    let n = y.nrows();
    // Per-column standardisation statistics over the training outputs.
    let mut means = vec![0.0; cols.len()];
    let mut stds = vec![0.0; cols.len()];
    for (idx, &c) in cols.iter().enumerate() {
        let col = y.column(c);
        let m = col.mean();
        let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
        means[idx] = m;
        stds[idx] = v.sqrt().max(1e-12);
    }
    let marg = model.marginals()?;
    let n_star = ystar.nrows();
    let q = marg.mean.ncols();
    let mut mean = DMatrix::zeros(n_star, q);
    let mut var = DMatrix::zeros(n_star, q);
    for i in 0..n_star {
        let mut best = (0usize, f64::INFINITY);
        for r in 0..n {
            let mut d2 = 0.0;
            for (idx, &c) in cols.iter().enumerate() {
                let d = (ystar[(i, idx)] - y[(r, c)]) / stds[idx];
                d2 += d * d;
            }
            if d2 < best.1 {
                best = (r, d2);
            }
        }
        mean.row_mut(i).copy_from(&marg.mean.row(best.0));
        var.row_mut(i).copy_from(&marg.var.row(best.0));
    }
    Ok(TestQ { mean, var })
}

/// Shared test-phase optimisation for factorised models: maximise
/// `F̂(q(X, X*); selected columns) − KL(q(X*) ‖ N(0, I))` over q(X*), with
/// the training ψ statistics cached and held fixed.
fn optimize_factorized_test_q(
    model: &Model,
    ystar_sel: &DMatrix<f64>,
    columns: Option<&[usize]>,
    config: &PredictConfig,
) -> Result<(TestQ, f64)> {
    let y = model.output.raw().ok_or_else(|| {
        Error::Capability("test-phase optimisation needs raw training outputs".into())
    })?;
    let y_sel = match columns {
        Some(cols) => select_columns(y, cols),
        None => y.clone(),
    };
    let output_joint = OutputData::from_raw(stack_rows(&y_sel, ystar_sel));
    let marg = model.marginals()?;
    let psi_train = psi_statistics(&model.kernel_f, &marg.mean, &marg.var, &model.xu)?;
    let kuu = model.kernel_f.matrix_self(&model.xu)?;

    let init = nearest_neighbour_init(model, ystar_sel, columns)?;
    let n_star = ystar_sel.nrows();
    let q = init.mean.ncols();
    let n_train = marg.mean.nrows();

    let mut x0 = DVector::zeros(2 * n_star * q);
    for i in 0..n_star {
        for j in 0..q {
            x0[i * q + j] = init.mean[(i, j)];
            x0[n_star * q + i * q + j] = init.var[(i, j)].max(1e-8).ln();
        }
    }
    let unpack_testq = |x: &DVector<f64>| -> TestQ {
        let mut mean = DMatrix::zeros(n_star, q);
        let mut var = DMatrix::zeros(n_star, q);
        for i in 0..n_star {
            for j in 0..q {
                mean[(i, j)] = x[i * q + j];
                var[(i, j)] = x[n_star * q + i * q + j].clamp(-40.0, 40.0).exp();
            }
        }
        TestQ { mean, var }
    };

    let mut objective = |x: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let tq = unpack_testq(x);
        let psi_star = psi_statistics(&model.kernel_f, &tq.mean, &tq.var, &model.xu)?;
        let psi_joint = crate::psi::PsiStats {
            psi0: psi_train.psi0 + psi_star.psi0,
            psi1: stack_rows(&psi_train.psi1, &psi_star.psi1),
            psi2: &psi_train.psi2 + &psi_star.psi2,
            per_point: None,
        };
        let factors = fhat_with_factors(&kuu, &psi_joint, &output_joint, model.beta)?;
        let dpsi1_star = factors.dpsi1.rows(n_train, n_star).into_owned();
        let grads = contract_psi_gradients(
            &model.kernel_f,
            &tq.mean,
            &tq.var,
            &model.xu,
            factors.dpsi0,
            &dpsi1_star,
            &factors.dpsi2,
        )?;
        let fq = FactorizedQ::new(tq.mean.clone(), tq.var.clone())?;
        let kl = kl_factorized(&fq);
        let (klm, klv) = kl_factorized_grads(&fq, None);
        let value = factors.value - kl;
        let mut g = DVector::zeros(x.len());
        for i in 0..n_star {
            for j in 0..q {
                g[i * q + j] = grads.dmu[(i, j)] - klm[(i, j)];
                g[n_star * q + i * q + j] =
                    (grads.dvar[(i, j)] - klv[(i, j)]) * tq.var[(i, j)];
            }
        }
        Ok((-value, -g))
    };

    let opts = OptimOptions {
        max_iters: config.iters,
        grad_tol: config.grad_tol,
        ..Default::default()
    };
    let result = minimize(&mut objective, x0, &opts)?;
    Ok((unpack_testq(&result.x), -result.f))
}

/// State of the coupled dynamical test-phase optimisation.
struct DynamicalTestFit {
    joint_q: DynamicalQ,
    kx_joint: DMatrix<f64>,
    objective: f64,
}

/// Coupled test phase for dynamical models: optimise q(X, X*) jointly over
/// the reparametrised coordinates of all points, hyperparameters fixed.
/// Objective: `F̂(joint; observed cols) + F̂(train; missing cols) − KL`.
fn optimize_dynamical_test_q(
    model: &Model,
    t_star: &DMatrix<f64>,
    ystar_sel: &DMatrix<f64>,
    columns: Option<&[usize]>,
    config: &PredictConfig,
) -> Result<DynamicalTestFit> {
    let (kernel_x, times, seq_starts) = match &model.prior {
        LatentPrior::Temporal { kernel, times, seq_starts } => (kernel, times, seq_starts),
        _ => return Err(Error::Capability("not a dynamical model".into())),
    };
    let d = match &model.q {
        QDist::Dynamical(d) => d,
        _ => return Err(Error::Argument("dynamical model without dynamical q".into())),
    };
    let y = model.output.raw().ok_or_else(|| {
        Error::Capability("test-phase optimisation needs raw training outputs".into())
    })?;
    let p = y.ncols();
    let all_cols: Vec<usize> = (0..p).collect();
    let obs_cols: Vec<usize> = columns.map(|c| c.to_vec()).unwrap_or_else(|| all_cols.clone());
    let mis_cols: Vec<usize> = all_cols.iter().copied().filter(|c| !obs_cols.contains(c)).collect();

    let n = times.nrows();
    let n_star = t_star.nrows();
    let q = d.q();
    let joint_times = stack_rows(times, t_star);
    // With multiple training sequences, the test points form a new sequence;
    // with a single sequence they continue it.
    let mut joint_starts = seq_starts.clone();
    if seq_starts.len() > 1 {
        joint_starts.push(n);
    }
    let kx_joint = build_temporal_cov(kernel_x, &joint_times, &joint_starts)?;

    let output_obs = OutputData::from_raw(stack_rows(&select_columns(y, &obs_cols), ystar_sel));
    let output_mis = if mis_cols.is_empty() {
        None
    } else {
        Some(OutputData::from_raw(select_columns(y, &mis_cols)))
    };
    let kuu = model.kernel_f.matrix_self(&model.xu)?;

    // Initial joint state: trained coordinates plus nearest-neighbour means
    // for the test part, converted through mu_bar = Kx⁻¹ mu.
    let marg = model.marginals()?;
    let init = nearest_neighbour_init(model, ystar_sel, columns)?;
    let mu_joint = stack_rows(&marg.mean, &init.mean);
    let (chol, _) = jittered_cholesky(&kx_joint, "joint Kx")?;
    let mut mu_bar0 = mu_joint.clone();
    chol.solve_mut(&mut mu_bar0);
    let mut lambda0 = DMatrix::zeros(n + n_star, q);
    lambda0.rows_mut(0, n).copy_from(&d.lambda);
    for i in 0..n_star {
        for j in 0..q {
            lambda0[(n + i, j)] = 1.0 / config.init_variance;
        }
    }

    let total = n + n_star;
    let mut x0 = DVector::zeros(2 * total * q);
    for i in 0..total {
        for j in 0..q {
            x0[i * q + j] = mu_bar0[(i, j)];
            x0[total * q + i * q + j] = lambda0[(i, j)].ln();
        }
    }
    let unpack_q = |x: &DVector<f64>| -> Result<DynamicalQ> {
        let mut mu_bar = DMatrix::zeros(total, q);
        let mut lambda = DMatrix::zeros(total, q);
        for i in 0..total {
            for j in 0..q {
                mu_bar[(i, j)] = x[i * q + j];
                lambda[(i, j)] = x[total * q + i * q + j].clamp(-40.0, 40.0).exp();
            }
        }
        DynamicalQ::new(mu_bar, lambda)
    };

    let mut objective = |x: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let jq = unpack_q(x)?;
        let transform = dynamical_transform(&jq, &kx_joint)?;
        let mean_all = &transform.mean;
        let var_all = &transform.svar;

        let psi_all = psi_statistics(&model.kernel_f, mean_all, var_all, &model.xu)?;
        let factors_obs = fhat_with_factors(&kuu, &psi_all, &output_obs, model.beta)?;
        let grads_obs = contract_psi_gradients(
            &model.kernel_f,
            mean_all,
            var_all,
            &model.xu,
            factors_obs.dpsi0,
            &factors_obs.dpsi1,
            &factors_obs.dpsi2,
        )?;
        let mut value = factors_obs.value;
        let mut dmu_hat = grads_obs.dmu;
        let mut dvar_hat = grads_obs.dvar;

        if let Some(out_mis) = &output_mis {
            let mean_train = mean_all.rows(0, n).into_owned();
            let var_train = var_all.rows(0, n).into_owned();
            let psi_train = psi_statistics(&model.kernel_f, &mean_train, &var_train, &model.xu)?;
            let factors_mis = fhat_with_factors(&kuu, &psi_train, out_mis, model.beta)?;
            let grads_mis = contract_psi_gradients(
                &model.kernel_f,
                &mean_train,
                &var_train,
                &model.xu,
                factors_mis.dpsi0,
                &factors_mis.dpsi1,
                &factors_mis.dpsi2,
            )?;
            value += factors_mis.value;
            for i in 0..n {
                for j in 0..q {
                    dmu_hat[(i, j)] += grads_mis.dmu[(i, j)];
                    dvar_hat[(i, j)] += grads_mis.dvar[(i, j)];
                }
            }
        }

        let kl = kl_dynamical_from_transform(&jq, &kx_joint, &transform);
        value -= kl;
        let (dmean, dvar) = dynamical_chain(&jq, &kx_joint, &transform, &dmu_hat, &dvar_hat);
        let mut g = DVector::zeros(x.len());
        for i in 0..total {
            for j in 0..q {
                g[i * q + j] = dmean[(i, j)];
                g[total * q + i * q + j] = dvar[(i, j)] * jq.lambda[(i, j)];
            }
        }
        Ok((-value, -g))
    };

    let opts = OptimOptions {
        max_iters: config.iters,
        grad_tol: config.grad_tol,
        ..Default::default()
    };
    let result = minimize(&mut objective, x0, &opts)?;
    Ok(DynamicalTestFit { joint_q: unpack_q(&result.x)?, kx_joint, objective: -result.f })
}

/// Approximate `log p(Y* | Y)` as a ratio of optimised lower bounds.
/// Dynamical models need the test timestamps.
pub fn log_density(
    ystar: &DMatrix<f64>,
    model: &Model,
    t_star: Option<&DMatrix<f64>>,
    config: &PredictConfig,
) -> Result<f64> {
    let p = model.output.p();
    if ystar.ncols() != p {
        return Err(Error::Argument(format!(
            "test outputs have {} columns, model has {p}",
            ystar.ncols()
        )));
    }
    if ystar.nrows() == 0 {
        return Ok(0.0);
    }
    match model.variant() {
        Variant::Static => {
            let marg = model.marginals()?;
            let psi_train =
                psi_statistics(&model.kernel_f, &marg.mean, &marg.var, &model.xu)?;
            let kuu = model.kernel_f.matrix_self(&model.xu)?;
            let fhat_train =
                fhat_with_factors(&kuu, &psi_train, &model.output, model.beta)?.value;
            let (_, objective) = optimize_factorized_test_q(model, ystar, None, config)?;
            Ok(objective - fhat_train)
        }
        Variant::Dynamical => {
            let t_star = t_star.ok_or_else(|| {
                Error::Argument("dynamical log-density needs test timestamps".into())
            })?;
            let f_train = model.lower_bound()?;
            let fit = optimize_dynamical_test_q(model, t_star, ystar, None, config)?;
            Ok(fit.objective - f_train)
        }
        Variant::UncertainInput => Err(Error::Capability(
            "log-density over unknown test inputs is not defined for the uncertain-input \
             variant; use predict_at_inputs with observed inputs"
                .into(),
        )),
    }
}

/// Optimise q(X*) from fully observed test outputs and return it (the
/// latent inference step of the semi-supervised algorithm).
pub fn infer_latent(
    ystar: &DMatrix<f64>,
    model: &Model,
    config: &PredictConfig,
) -> Result<TestQ> {
    if model.variant() != Variant::Static {
        return Err(Error::Capability(
            "latent inference from outputs is implemented for the static variant".into(),
        ));
    }
    let (tq, _) = optimize_factorized_test_q(model, ystar, None, config)?;
    Ok(tq)
}

/// Result of a partial-output reconstruction.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub latent: TestQ,
    pub moments: PredictiveMoments,
}

/// Reconstruct the missing output columns of partially observed test points.
/// `observed_cols` indexes the columns present in `ystar_observed`.
pub fn reconstruct(
    ystar_observed: &DMatrix<f64>,
    observed_cols: &[usize],
    model: &Model,
    t_star: Option<&DMatrix<f64>>,
    config: &PredictConfig,
    include_noise: bool,
) -> Result<Reconstruction> {
    let p = model.output.p();
    if observed_cols.is_empty() {
        return Err(Error::Argument("no observed columns; use forecast for empty evidence".into()));
    }
    let mut sorted = observed_cols.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != observed_cols.len() || *sorted.last().unwrap() >= p {
        return Err(Error::Argument("observed column indices must be unique and < p".into()));
    }
    if ystar_observed.ncols() != observed_cols.len() {
        return Err(Error::Argument(format!(
            "evidence has {} columns but {} indices were given",
            ystar_observed.ncols(),
            observed_cols.len()
        )));
    }
    let missing: Vec<usize> = (0..p).filter(|c| !observed_cols.contains(c)).collect();
    if missing.is_empty() {
        return Err(Error::Argument(
            "all columns observed: use log_density for fully observed test points".into(),
        ));
    }

    match model.variant() {
        Variant::Static => {
            let (latent, _) =
                optimize_factorized_test_q(model, ystar_observed, Some(observed_cols), config)?;
            let weights = posterior_weights(model, Some(&missing))?;
            let moments = uncertain_input_moments(model, &weights, &latent, include_noise)?;
            Ok(Reconstruction { latent, moments })
        }
        Variant::Dynamical => {
            let t_star = t_star.ok_or_else(|| {
                Error::Argument("dynamical reconstruction needs test timestamps".into())
            })?;
            if config.coupled_dynamical {
                let fit = optimize_dynamical_test_q(
                    model,
                    t_star,
                    ystar_observed,
                    Some(observed_cols),
                    config,
                )?;
                let n = model.n();
                let n_star = t_star.nrows();
                let transform = dynamical_transform(&fit.joint_q, &fit.kx_joint)?;
                let latent = TestQ {
                    mean: transform.mean.rows(n, n_star).into_owned(),
                    var: transform.svar.rows(n, n_star).into_owned(),
                };
                // Recompute the posterior weights from the training rows of
                // the coupled distribution (no precomputations carry over).
                let marg_mean = transform.mean.rows(0, n).into_owned();
                let marg_var = transform.svar.rows(0, n).into_owned();
                let psi_train =
                    psi_statistics(&model.kernel_f, &marg_mean, &marg_var, &model.xu)?;
                let kuu = model.kernel_f.matrix_self(&model.xu)?;
                let y = model.output.raw().unwrap();
                let factors = fhat_with_factors(
                    &kuu,
                    &psi_train,
                    &OutputData::from_raw(select_columns(y, &missing)),
                    model.beta,
                )?;
                let weights = PosteriorWeights {
                    b: factors.b_weights.unwrap(),
                    d: factors.kuu_inv_minus_sigma2_ainv,
                };
                let moments = uncertain_input_moments(model, &weights, &latent, include_noise)?;
                Ok(Reconstruction { latent, moments })
            } else {
                // Factorised shortcut: training part fixed, test points form
                // an independent temporal block.
                let latent =
                    reconstruct_dynamical_factorized(model, t_star, ystar_observed, observed_cols, config)?;
                let weights = posterior_weights(model, Some(&missing))?;
                let moments = uncertain_input_moments(model, &weights, &latent, include_noise)?;
                Ok(Reconstruction { latent, moments })
            }
        }
        Variant::UncertainInput => Err(Error::Capability(
            "reconstruction from partial outputs is not defined for the uncertain-input \
             variant; use predict_at_inputs"
                .into(),
        )),
    }
}

/// Factorised dynamical shortcut: q(X) stays fixed; q(X*) is an independent
/// temporal block optimised against the observed columns.
fn reconstruct_dynamical_factorized(
    model: &Model,
    t_star: &DMatrix<f64>,
    ystar_sel: &DMatrix<f64>,
    observed_cols: &[usize],
    config: &PredictConfig,
) -> Result<TestQ> {
    let kernel_x = match &model.prior {
        LatentPrior::Temporal { kernel, .. } => kernel,
        _ => unreachable!(),
    };
    let kx_star = build_temporal_cov(kernel_x, t_star, &[0])?;
    let y = model.output.raw().unwrap();
    let y_sel = select_columns(y, observed_cols);
    let output_joint = OutputData::from_raw(stack_rows(&y_sel, ystar_sel));
    let marg = model.marginals()?;
    let psi_train = psi_statistics(&model.kernel_f, &marg.mean, &marg.var, &model.xu)?;
    let kuu = model.kernel_f.matrix_self(&model.xu)?;

    let init = nearest_neighbour_init(model, ystar_sel, Some(observed_cols))?;
    let n_star = t_star.nrows();
    let q = init.mean.ncols();
    let n_train = marg.mean.nrows();
    let (chol, _) = jittered_cholesky(&kx_star, "test Kx")?;
    let mut mu_bar0 = init.mean.clone();
    chol.solve_mut(&mut mu_bar0);

    let mut x0 = DVector::zeros(2 * n_star * q);
    for i in 0..n_star {
        for j in 0..q {
            x0[i * q + j] = mu_bar0[(i, j)];
            x0[n_star * q + i * q + j] = (1.0 / config.init_variance).ln();
        }
    }
    let unpack_q = |x: &DVector<f64>| -> Result<DynamicalQ> {
        let mut mu_bar = DMatrix::zeros(n_star, q);
        let mut lambda = DMatrix::zeros(n_star, q);
        for i in 0..n_star {
            for j in 0..q {
                mu_bar[(i, j)] = x[i * q + j];
                lambda[(i, j)] = x[n_star * q + i * q + j].clamp(-40.0, 40.0).exp();
            }
        }
        DynamicalQ::new(mu_bar, lambda)
    };
    let mut objective = |x: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let tq = unpack_q(x)?;
        let transform = dynamical_transform(&tq, &kx_star)?;
        let psi_star =
            psi_statistics(&model.kernel_f, &transform.mean, &transform.svar, &model.xu)?;
        let psi_joint = crate::psi::PsiStats {
            psi0: psi_train.psi0 + psi_star.psi0,
            psi1: stack_rows(&psi_train.psi1, &psi_star.psi1),
            psi2: &psi_train.psi2 + &psi_star.psi2,
            per_point: None,
        };
        let factors = fhat_with_factors(&kuu, &psi_joint, &output_joint, model.beta)?;
        let dpsi1_star = factors.dpsi1.rows(n_train, n_star).into_owned();
        let grads = contract_psi_gradients(
            &model.kernel_f,
            &transform.mean,
            &transform.svar,
            &model.xu,
            factors.dpsi0,
            &dpsi1_star,
            &factors.dpsi2,
        )?;
        let kl = kl_dynamical_from_transform(&tq, &kx_star, &transform);
        let value = factors.value - kl;
        let (dmean, dvar) = dynamical_chain(&tq, &kx_star, &transform, &grads.dmu, &grads.dvar);
        let mut g = DVector::zeros(x.len());
        for i in 0..n_star {
            for j in 0..q {
                g[i * q + j] = dmean[(i, j)];
                g[n_star * q + i * q + j] = dvar[(i, j)] * tq.lambda[(i, j)];
            }
        }
        Ok((-value, -g))
    };
    let opts = OptimOptions {
        max_iters: config.iters,
        grad_tol: config.grad_tol,
        ..Default::default()
    };
    let result = minimize(&mut objective, x0, &opts)?;
    let transform = dynamical_transform(&unpack_q(&result.x)?, &kx_star)?;
    Ok(TestQ { mean: transform.mean, var: transform.svar })
}

/// Forecast outputs at future timestamps of a single-sequence dynamical
/// model. The predictive q(X*) comes from standard GP conditioning of the
/// temporal prior and needs no optimisation.
pub fn forecast(
    t_star: &DMatrix<f64>,
    model: &Model,
    include_noise: bool,
) -> Result<(TestQ, PredictiveMoments)> {
    let (kernel_x, times, seq_starts) = match &model.prior {
        LatentPrior::Temporal { kernel, times, seq_starts } => (kernel, times, seq_starts),
        _ => return Err(Error::Capability("forecast needs a dynamical model".into())),
    };
    if seq_starts.len() > 1 {
        return Err(Error::Capability(
            "forecast assumes a single training sequence; use reconstruct with timestamps \
             for multi-sequence models"
                .into(),
        ));
    }
    let d = match &model.q {
        QDist::Dynamical(d) => d,
        _ => return Err(Error::Argument("dynamical model without dynamical q".into())),
    };
    let kx = build_temporal_cov(kernel_x, times, seq_starts)?;
    let transform = dynamical_transform(d, &kx)?;
    let kstar_n = kernel_x.matrix(t_star, times)?;
    let kss = kernel_x.diag_self(t_star)?;
    let n_star = t_star.nrows();
    let q = d.q();
    let mut mean = DMatrix::zeros(n_star, q);
    let mut var = DMatrix::zeros(n_star, q);
    for j in 0..q {
        let mu_j = &kstar_n * d.mu_bar.column(j).into_owned();
        mean.column_mut(j).copy_from(&mu_j);
        // var = K** - K*n (Kx + Lambda^-1)^-1 Kn* with (Kx + Lambda^-1)^-1 = Bhat.
        let bk = &kstar_n * &transform.bhat[j];
        for i in 0..n_star {
            let reduction = bk.row(i).dot(&kstar_n.row(i));
            var[(i, j)] = (kss[i] - reduction).max(0.0);
        }
    }
    let latent = TestQ { mean, var };
    let moments = predict_at_inputs(model, &latent, include_noise)?;
    Ok((latent, moments))
}

/// Reformat a multivariate series into auto-regressive windows:
/// `zhat_i = [y_i, ..., y_{i+tau-1}]`, `yhat_i = y_{i+tau}`.
pub fn autoregress_dataset(y: &DMatrix<f64>, tau: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, p) = y.shape();
    if tau < 1 {
        return Err(Error::Argument("window size must be at least 1".into()));
    }
    if n <= tau {
        return Err(Error::Argument(format!(
            "need more than tau = {tau} points, got {n}"
        )));
    }
    let rows = n - tau;
    let mut zhat = DMatrix::zeros(rows, tau * p);
    let mut yhat = DMatrix::zeros(rows, p);
    for i in 0..rows {
        for w in 0..tau {
            for j in 0..p {
                zhat[(i, w * p + j)] = y[(i + w, j)];
            }
        }
        for j in 0..p {
            yhat[(i, j)] = y[(i + tau, j)];
        }
    }
    Ok((zhat, yhat))
}

/// Iterative one-step-ahead prediction with uncertainty propagation. The
/// model must be the uncertain-input variant trained on auto-regressive
/// windows; each prediction's variance feeds the next window.
pub fn iterative_predict(
    model: &Model,
    steps: usize,
    include_noise: bool,
) -> Result<PredictiveMoments> {
    if steps < 1 {
        return Err(Error::Argument("need at least one prediction step".into()));
    }
    if model.variant() != Variant::UncertainInput {
        return Err(Error::Capability(
            "iterative prediction needs an uncertain-input model over auto-regressive windows"
                .into(),
        ));
    }
    let z = match &model.prior {
        LatentPrior::UncertainInput { z, .. } => z,
        _ => unreachable!(),
    };
    let y = model.output.raw().ok_or_else(|| {
        Error::Capability("iterative prediction needs raw training outputs".into())
    })?;
    let p = y.ncols();
    let q_lat = z.ncols();
    if q_lat % p != 0 {
        return Err(Error::Argument(format!(
            "window width {q_lat} is not a multiple of the output dimension {p}"
        )));
    }
    let weights = posterior_weights(model, None)?;

    // The window that follows the training data: drop the oldest block of
    // the last training window, append the last training output.
    let last = z.nrows() - 1;
    let mut window_mean: Vec<f64> = Vec::with_capacity(q_lat);
    let mut window_var: Vec<f64> = Vec::with_capacity(q_lat);
    for j in p..q_lat {
        window_mean.push(z[(last, j)]);
        window_var.push(0.0);
    }
    for j in 0..p {
        window_mean.push(y[(last, j)]);
        window_var.push(0.0);
    }

    let mut means = DMatrix::zeros(steps, p);
    let mut vars = DMatrix::zeros(steps, p);
    for step in 0..steps {
        let tq = TestQ {
            mean: DMatrix::from_row_iterator(1, q_lat, window_mean.iter().copied()),
            var: DMatrix::from_row_iterator(1, q_lat, window_var.iter().copied()),
        };
        let m = uncertain_input_moments(model, &weights, &tq, include_noise)?;
        for j in 0..p {
            means[(step, j)] = m.mean[(0, j)];
            vars[(step, j)] = m.var[(0, j)];
        }
        window_mean.drain(0..p);
        window_var.drain(0..p);
        for j in 0..p {
            window_mean.push(m.mean[(0, j)]);
            window_var.push(m.var[(0, j)]);
        }
    }
    Ok(PredictiveMoments { mean: means, var: vars, noise_included: include_noise })
}
