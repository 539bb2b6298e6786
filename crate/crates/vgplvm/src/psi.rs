//! Analytic kernel expectations under a factorised Gaussian q(X).
//!
//! The ψ statistics are the expectations of `tr K_ff`, `K_fu` and
//! `K_uf K_fu` under per-point Gaussian marginals `N(μ_i, diag(S_i))`. They
//! are available in closed form for the ARD exponentiated quadratic and the
//! ARD linear kernel, optionally combined with white-noise and bias terms
//! (white contributes to ψ0 only; bias contributes constants and analytic
//! cross terms). Any other kernel routes to the quadrature oracle.
//!
//! All per-point quantities decompose over data points, so the heavy loops
//! are chunked via `crate::parallel` with a fixed reduction order.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::kernel::{Kernel, KernelFamily, KernelTerm};
use crate::parallel::{chunked_fill, chunked_reduce};

/// The ψ statistics triple, with optional per-point partials.
#[derive(Debug, Clone)]
pub struct PsiStats {
    /// `Σ_i E[k(x_i, x_i)]`.
    pub psi0: f64,
    /// n×m matrix `E[k(x_i, xu_k)]`.
    pub psi1: DMatrix<f64>,
    /// m×m matrix `Σ_i E[k(x_i, xu_k) k(xu_k', x_i)]`.
    pub psi2: DMatrix<f64>,
    /// Per-point ψ0 and Ψ2 partials, retained on request for incremental
    /// updates at test time.
    pub per_point: Option<PerPointPartials>,
}

#[derive(Debug, Clone)]
pub struct PerPointPartials {
    pub psi0: Vec<f64>,
    pub psi2: Vec<DMatrix<f64>>,
}

/// Gradients of a scalar function of the ψ statistics, obtained by
/// contracting the caller's factors `(dψ0, dΨ1, dΨ2)`.
#[derive(Debug, Clone)]
pub struct PsiGradients {
    pub dmu: DMatrix<f64>,
    pub dvar: DMatrix<f64>,
    pub dxu: DMatrix<f64>,
    /// Kernel-parameter gradients in natural space, flat layout.
    pub dtheta: Vec<f64>,
}

/// Split of a kernel into an analytic main term plus white/bias offsets.
struct Decomposition<'a> {
    main: Option<(&'a KernelTerm, usize)>,
    white: Vec<usize>,
    bias: Vec<usize>,
    white_total: f64,
    bias_total: f64,
}

fn decompose(kernel: &Kernel) -> Result<Decomposition<'_>> {
    let mut decomp = Decomposition {
        main: None,
        white: Vec::new(),
        bias: Vec::new(),
        white_total: 0.0,
        bias_total: 0.0,
    };
    let mut offset = 0;
    for term in &kernel.terms {
        match term.family {
            KernelFamily::RbfArd | KernelFamily::LinearArd => {
                if decomp.main.is_some() {
                    return Err(Error::Capability(
                        "analytic psi statistics support a single RBF-ARD or linear-ARD term \
                         (plus white/bias); use the quadrature oracle for other sums"
                            .into(),
                    ));
                }
                decomp.main = Some((term, offset));
            }
            KernelFamily::White => {
                decomp.white.push(offset);
                decomp.white_total += term.params[0];
            }
            KernelFamily::Bias => {
                decomp.bias.push(offset);
                decomp.bias_total += term.params[0];
            }
            other => {
                return Err(Error::Capability(format!(
                    "no analytic psi statistics for the {:?} kernel; use the quadrature oracle",
                    other
                )));
            }
        }
        offset += term.params.len();
    }
    Ok(decomp)
}

fn validate_marginals(mu: &DMatrix<f64>, var: &DMatrix<f64>, xu: &DMatrix<f64>) -> Result<()> {
    if var.shape() != mu.shape() || xu.ncols() != mu.ncols() {
        return Err(Error::Argument(format!(
            "inconsistent shapes: mu {:?}, var {:?}, xu {:?}",
            mu.shape(),
            var.shape(),
            xu.shape()
        )));
    }
    if var.iter().any(|s| *s < 0.0) {
        return Err(Error::State("marginal variances must be nonnegative".into()));
    }
    Ok(())
}

/// Analytic ψ statistics.
pub fn psi_statistics(
    kernel: &Kernel,
    mu: &DMatrix<f64>,
    var: &DMatrix<f64>,
    xu: &DMatrix<f64>,
) -> Result<PsiStats> {
    psi_statistics_impl(kernel, mu, var, xu, false)
}

/// Analytic ψ statistics retaining per-point ψ0 and Ψ2 partials.
pub fn psi_statistics_with_partials(
    kernel: &Kernel,
    mu: &DMatrix<f64>,
    var: &DMatrix<f64>,
    xu: &DMatrix<f64>,
) -> Result<PsiStats> {
    psi_statistics_impl(kernel, mu, var, xu, true)
}

fn psi_statistics_impl(
    kernel: &Kernel,
    mu: &DMatrix<f64>,
    var: &DMatrix<f64>,
    xu: &DMatrix<f64>,
    with_partials: bool,
) -> Result<PsiStats> {
    validate_marginals(mu, var, xu)?;
    kernel.validate(mu.ncols())?;
    let decomp = decompose(kernel)?;
    let n = mu.nrows();
    let m = xu.nrows();

    // Psi1 of the main term; rows are independent across data points.
    let mut psi1_main = vec![0.0; n * m];
    if let Some((term, _)) = decomp.main {
        chunked_fill(&mut psi1_main, n, m, |range, out| {
            let mut local = 0;
            for i in range {
                for k in 0..m {
                    out[local * m + k] = psi1_entry(term, mu, var, xu, i, k);
                }
                local += 1;
            }
        });
    }

    // psi0 and Psi2 partial sums, reduced in fixed chunk order.
    struct Partial {
        psi0: f64,
        psi2: DMatrix<f64>,
        per_point: Vec<(f64, DMatrix<f64>)>,
    }
    let reduced = chunked_reduce(
        n,
        |range| {
            let mut part = Partial {
                psi0: 0.0,
                psi2: DMatrix::zeros(m, m),
                per_point: Vec::new(),
            };
            let mut point = DMatrix::zeros(m, m);
            for i in range {
                let psi0_i = match decomp.main {
                    Some((term, _)) => psi0_entry(term, mu, var, i),
                    None => 0.0,
                } + decomp.white_total
                    + decomp.bias_total;
                part.psi0 += psi0_i;
                point.fill(0.0);
                if let Some((term, _)) = decomp.main {
                    psi2_point(term, mu, var, xu, i, &mut point);
                }
                if decomp.bias_total > 0.0 {
                    let b = decomp.bias_total;
                    for k in 0..m {
                        let pk = psi1_main[i * m + k];
                        for kp in 0..m {
                            point[(k, kp)] += b * (pk + psi1_main[i * m + kp]) + b * b;
                        }
                    }
                }
                part.psi2 += &point;
                if with_partials {
                    part.per_point.push((psi0_i, point.clone()));
                }
            }
            part
        },
        |mut a, b| {
            a.psi0 += b.psi0;
            a.psi2 += b.psi2;
            a.per_point.extend(b.per_point);
            a
        },
    )
    .unwrap_or(Partial { psi0: 0.0, psi2: DMatrix::zeros(m, m), per_point: Vec::new() });

    let mut psi1 = DMatrix::from_row_iterator(n, m, psi1_main.iter().copied());
    if decomp.bias_total > 0.0 {
        psi1.add_scalar_mut(decomp.bias_total);
    }
    let per_point = if with_partials {
        let (psi0s, psi2s) = reduced.per_point.into_iter().unzip();
        Some(PerPointPartials { psi0: psi0s, psi2: psi2s })
    } else {
        None
    };
    Ok(PsiStats { psi0: reduced.psi0, psi1, psi2: reduced.psi2, per_point })
}

fn psi0_entry(term: &KernelTerm, mu: &DMatrix<f64>, var: &DMatrix<f64>, i: usize) -> f64 {
    match term.family {
        KernelFamily::RbfArd => term.params[0],
        KernelFamily::LinearArd => (0..mu.ncols())
            .map(|j| term.params[j] * (mu[(i, j)] * mu[(i, j)] + var[(i, j)]))
            .sum(),
        _ => unreachable!(),
    }
}

fn psi1_entry(
    term: &KernelTerm,
    mu: &DMatrix<f64>,
    var: &DMatrix<f64>,
    xu: &DMatrix<f64>,
    i: usize,
    k: usize,
) -> f64 {
    let q = mu.ncols();
    match term.family {
        KernelFamily::RbfArd => {
            let mut value = term.params[0];
            for j in 0..q {
                let w = term.params[1 + j];
                let d = mu[(i, j)] - xu[(k, j)];
                let denom = w * var[(i, j)] + 1.0;
                value *= (-0.5 * w * d * d / denom).exp() / denom.sqrt();
            }
            value
        }
        KernelFamily::LinearArd => {
            (0..q).map(|j| term.params[j] * mu[(i, j)] * xu[(k, j)]).sum()
        }
        _ => unreachable!(),
    }
}

/// Fill `out` with the m×m per-point Ψ2 partial for data point `i`.
fn psi2_point(
    term: &KernelTerm,
    mu: &DMatrix<f64>,
    var: &DMatrix<f64>,
    xu: &DMatrix<f64>,
    i: usize,
    out: &mut DMatrix<f64>,
) {
    let q = mu.ncols();
    let m = xu.nrows();
    match term.family {
        KernelFamily::RbfArd => {
            let sigma4 = term.params[0] * term.params[0];
            for k in 0..m {
                for kp in k..m {
                    let mut value = sigma4;
                    for j in 0..q {
                        let w = term.params[1 + j];
                        let delta = xu[(k, j)] - xu[(kp, j)];
                        let xbar = 0.5 * (xu[(k, j)] + xu[(kp, j)]);
                        let dd = mu[(i, j)] - xbar;
                        let denom = 2.0 * w * var[(i, j)] + 1.0;
                        value *= (-0.25 * w * delta * delta - w * dd * dd / denom).exp()
                            / denom.sqrt();
                    }
                    out[(k, kp)] = value;
                    out[(kp, k)] = value;
                }
            }
        }
        KernelFamily::LinearArd => {
            for k in 0..m {
                let pk = psi1_entry(term, mu, var, xu, i, k);
                for kp in k..m {
                    let pkp = psi1_entry(term, mu, var, xu, i, kp);
                    let mut value = pk * pkp;
                    for j in 0..q {
                        let c = term.params[j];
                        value += c * c * var[(i, j)] * xu[(k, j)] * xu[(kp, j)];
                    }
                    out[(k, kp)] = value;
                    out[(kp, k)] = value;
                }
            }
        }
        _ => unreachable!(),
    }
}

/// Contract caller-supplied factors against the ψ-statistic gradients:
/// returns the gradients of `dψ0·ψ0 + <dΨ1, Ψ1> + <dΨ2, Ψ2>` with respect to
/// the marginal means and variances, the inducing inputs and the kernel
/// parameters. `dpsi2` must be symmetric.
pub fn contract_psi_gradients(
    kernel: &Kernel,
    mu: &DMatrix<f64>,
    var: &DMatrix<f64>,
    xu: &DMatrix<f64>,
    dpsi0: f64,
    dpsi1: &DMatrix<f64>,
    dpsi2: &DMatrix<f64>,
) -> Result<PsiGradients> {
    validate_marginals(mu, var, xu)?;
    kernel.validate(mu.ncols())?;
    let decomp = decompose(kernel)?;
    let (n, q) = mu.shape();
    let m = xu.nrows();
    debug_assert_eq!(dpsi1.shape(), (n, m));
    debug_assert_eq!(dpsi2.shape(), (m, m));

    let n_theta = kernel.param_count();
    let mut dtheta = vec![0.0; n_theta];

    // White and bias enter psi0 linearly.
    for &off in &decomp.white {
        dtheta[off] += n as f64 * dpsi0;
    }
    // Bias also enters Psi1 as a constant and Psi2 through cross terms.
    let dpsi2_rowsum: Vec<f64> = (0..m).map(|k| dpsi2.row(k).sum()).collect();
    let dpsi2_total: f64 = dpsi2_rowsum.iter().sum();
    if !decomp.bias.is_empty() {
        // Column sums of the main-term Psi1 (zero when there is no main term).
        let mut main_colsum = vec![0.0; m];
        if let Some((term, _)) = decomp.main {
            for i in 0..n {
                for k in 0..m {
                    main_colsum[k] += psi1_entry(term, mu, var, xu, i, k);
                }
            }
        }
        let cross: f64 = (0..m).map(|k| 2.0 * dpsi2_rowsum[k] * main_colsum[k]).sum();
        let dbias = n as f64 * dpsi0
            + dpsi1.sum()
            + cross
            + 2.0 * decomp.bias_total * n as f64 * dpsi2_total;
        for &off in &decomp.bias {
            dtheta[off] += dbias;
        }
    }

    let (term, theta_off) = match decomp.main {
        Some(pair) => pair,
        None => {
            return Ok(PsiGradients {
                dmu: DMatrix::zeros(n, q),
                dvar: DMatrix::zeros(n, q),
                dxu: DMatrix::zeros(m, q),
                dtheta,
            });
        }
    };

    // The bias cross terms add 2·θb·rowsum(dΨ2) to the effective Psi1 factor.
    let bias_row_bonus: Vec<f64> = dpsi2_rowsum
        .iter()
        .map(|r| 2.0 * decomp.bias_total * r)
        .collect();

    struct ChunkGrad {
        dmu: Vec<f64>,
        dvar: Vec<f64>,
        dxu: DMatrix<f64>,
        dtheta_main: Vec<f64>,
    }
    let n_main = term.params.len();
    let reduced = chunked_reduce(
        n,
        |range| {
            let mut chunk = ChunkGrad {
                dmu: vec![0.0; range.len() * q],
                dvar: vec![0.0; range.len() * q],
                dxu: DMatrix::zeros(m, q),
                dtheta_main: vec![0.0; n_main],
            };
            for (local, i) in range.enumerate() {
                let dmu_i = &mut chunk.dmu[local * q..(local + 1) * q];
                let dvar_i = &mut chunk.dvar[local * q..(local + 1) * q];
                match term.family {
                    KernelFamily::RbfArd => accumulate_rbf_point(
                        term, mu, var, xu, dpsi0, dpsi1, dpsi2, &bias_row_bonus, i, dmu_i,
                        dvar_i, &mut chunk.dxu, &mut chunk.dtheta_main,
                    ),
                    KernelFamily::LinearArd => accumulate_linear_point(
                        term, mu, var, xu, dpsi0, dpsi1, dpsi2, &bias_row_bonus, i, dmu_i,
                        dvar_i, &mut chunk.dxu, &mut chunk.dtheta_main,
                    ),
                    _ => unreachable!(),
                }
            }
            chunk
        },
        |mut a, b| {
            a.dmu.extend(b.dmu);
            a.dvar.extend(b.dvar);
            a.dxu += b.dxu;
            for (x, y) in a.dtheta_main.iter_mut().zip(&b.dtheta_main) {
                *x += y;
            }
            a
        },
    )
    .unwrap();

    for (j, g) in reduced.dtheta_main.iter().enumerate() {
        dtheta[theta_off + j] += g;
    }
    Ok(PsiGradients {
        dmu: DMatrix::from_row_iterator(n, q, reduced.dmu),
        dvar: DMatrix::from_row_iterator(n, q, reduced.dvar),
        dxu: reduced.dxu,
        dtheta,
    })
}

#[allow(clippy::too_many_arguments)]
fn accumulate_rbf_point(
    term: &KernelTerm,
    mu: &DMatrix<f64>,
    var: &DMatrix<f64>,
    xu: &DMatrix<f64>,
    dpsi0: f64,
    dpsi1: &DMatrix<f64>,
    dpsi2: &DMatrix<f64>,
    bias_row_bonus: &[f64],
    i: usize,
    dmu: &mut [f64],
    dvar: &mut [f64],
    dxu: &mut DMatrix<f64>,
    dtheta: &mut [f64],
) {
    let q = mu.ncols();
    let m = xu.nrows();
    let variance = term.params[0];
    let weights = &term.params[1..];

    // psi0 term: d psi0_i / d variance = 1.
    dtheta[0] += dpsi0;

    // Psi1 terms.
    for k in 0..m {
        let p = psi1_entry(term, mu, var, xu, i, k);
        let f = dpsi1[(i, k)] + bias_row_bonus[k];
        if f == 0.0 {
            continue;
        }
        let fp = f * p;
        dtheta[0] += fp / variance;
        for j in 0..q {
            let w = weights[j];
            let s = var[(i, j)];
            let d = mu[(i, j)] - xu[(k, j)];
            let denom = w * s + 1.0;
            dmu[j] += fp * (-w * d / denom);
            dvar[j] += fp * (0.5 * w * w * d * d / (denom * denom) - 0.5 * w / denom);
            dxu[(k, j)] += fp * (w * d / denom);
            dtheta[1 + j] += fp * (-0.5 * d * d / (denom * denom) - 0.5 * s / denom);
        }
    }

    // Psi2 terms: loop over unordered pairs, using symmetry of dpsi2 and of
    // the per-point Psi2. Inducing-input rows use the first-slot convention
    // with the factor 2 that accounts for both occurrences.
    let sigma4 = variance * variance;
    for k in 0..m {
        for kp in k..m {
            let f = dpsi2[(k, kp)];
            if f == 0.0 {
                continue;
            }
            let pair_mult = if k == kp { 1.0 } else { 2.0 };
            let mut t = sigma4;
            for j in 0..q {
                let w = weights[j];
                let delta = xu[(k, j)] - xu[(kp, j)];
                let dd = mu[(i, j)] - 0.5 * (xu[(k, j)] + xu[(kp, j)]);
                let denom = 2.0 * w * var[(i, j)] + 1.0;
                t *= (-0.25 * w * delta * delta - w * dd * dd / denom).exp() / denom.sqrt();
            }
            let ft = f * t;
            dtheta[0] += pair_mult * 2.0 * ft / variance;
            for j in 0..q {
                let w = weights[j];
                let s = var[(i, j)];
                let delta = xu[(k, j)] - xu[(kp, j)];
                let dd = mu[(i, j)] - 0.5 * (xu[(k, j)] + xu[(kp, j)]);
                let denom = 2.0 * w * s + 1.0;
                dmu[j] += pair_mult * ft * (-2.0 * w * dd / denom);
                dvar[j] +=
                    pair_mult * ft * (2.0 * w * w * dd * dd / (denom * denom) - w / denom);
                dtheta[1 + j] += pair_mult
                    * ft
                    * (-0.25 * delta * delta - dd * dd / (denom * denom) - s / denom);
                // d/d xu[k]: first slot of the (k, kp) pair.
                dxu[(k, j)] += 2.0 * ft * (-0.5 * w * delta + w * dd / denom);
                if kp != k {
                    // First slot of the mirrored (kp, k) pair; delta flips sign.
                    dxu[(kp, j)] += 2.0 * ft * (0.5 * w * delta + w * dd / denom);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn accumulate_linear_point(
    term: &KernelTerm,
    mu: &DMatrix<f64>,
    var: &DMatrix<f64>,
    xu: &DMatrix<f64>,
    dpsi0: f64,
    dpsi1: &DMatrix<f64>,
    dpsi2: &DMatrix<f64>,
    bias_row_bonus: &[f64],
    i: usize,
    dmu: &mut [f64],
    dvar: &mut [f64],
    dxu: &mut DMatrix<f64>,
    dtheta: &mut [f64],
) {
    let q = mu.ncols();
    let m = xu.nrows();
    let c = &term.params[..];

    // psi0_i = sum_j c_j (mu^2 + S).
    for j in 0..q {
        let mj = mu[(i, j)];
        dmu[j] += dpsi0 * 2.0 * c[j] * mj;
        dvar[j] += dpsi0 * c[j];
        dtheta[j] += dpsi0 * (mj * mj + var[(i, j)]);
    }

    // Psi1 terms.
    for k in 0..m {
        let f = dpsi1[(i, k)] + bias_row_bonus[k];
        if f == 0.0 {
            continue;
        }
        for j in 0..q {
            dmu[j] += f * c[j] * xu[(k, j)];
            dxu[(k, j)] += f * c[j] * mu[(i, j)];
            dtheta[j] += f * mu[(i, j)] * xu[(k, j)];
        }
    }

    // Psi2 terms: Psi2^i[k,kp] = P_k P_kp + sum_j c_j^2 S_j xu[k,j] xu[kp,j].
    let p: Vec<f64> = (0..m).map(|k| psi1_entry(term, mu, var, xu, i, k)).collect();
    for k in 0..m {
        for kp in k..m {
            let f = dpsi2[(k, kp)];
            if f == 0.0 {
                continue;
            }
            let pair_mult = if k == kp { 1.0 } else { 2.0 };
            for j in 0..q {
                let cj = c[j];
                let sj = var[(i, j)];
                let mj = mu[(i, j)];
                let uk = xu[(k, j)];
                let ukp = xu[(kp, j)];
                dmu[j] += pair_mult * f * cj * (uk * p[kp] + p[k] * ukp);
                dvar[j] += pair_mult * f * cj * cj * uk * ukp;
                dtheta[j] += pair_mult
                    * f
                    * (mj * uk * p[kp] + p[k] * mj * ukp + 2.0 * cj * sj * uk * ukp);
                dxu[(k, j)] += 2.0 * f * (cj * mj * p[kp] + cj * cj * sj * ukp);
                if kp != k {
                    dxu[(kp, j)] += 2.0 * f * (cj * mj * p[k] + cj * cj * sj * uk);
                }
            }
        }
    }
}
