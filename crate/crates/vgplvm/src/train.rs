//! Model initialisation and fitting.

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::bound::OutputData;
use crate::error::{Error, Result};
use crate::kernel::Kernel;
use crate::linalg::jittered_cholesky;
use crate::model::{Model, QDist};
use crate::optim::{minimize, OptimOptions};
use crate::params::{bound_and_packed_gradient, pack, unpack};
use crate::variational::{build_temporal_cov, DynamicalQ, FactorizedQ, LatentPrior};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub latent_dim: usize,
    pub num_inducing: usize,
    /// Warm-up iterations with the noise precision held fixed.
    pub fixed_beta_iters: usize,
    /// Joint-optimisation stages.
    pub main_iters: Vec<usize>,
    /// Initial q(X) variances.
    pub init_variance: f64,
    pub seed: u64,
    pub grad_tol: f64,
    pub f_tol: f64,
    /// Freeze the inducing inputs throughout.
    pub fix_inducing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            latent_dim: 2,
            num_inducing: 10,
            fixed_beta_iters: 100,
            main_iters: vec![500],
            init_variance: 0.5,
            seed: 0,
            grad_tol: 1e-6,
            f_tol: 1e-10,
            fix_inducing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Argument("latent dimensionality must be at least 1".into()));
        }
        if self.num_inducing == 0 {
            return Err(Error::Argument("need at least one inducing point".into()));
        }
        if !(self.init_variance > 0.0) {
            return Err(Error::Argument("init_variance must be positive".into()));
        }
        Ok(())
    }
}

/// Principal-component scores of the centred outputs, computed from the
/// n×n Gram matrix so the cost does not depend on p. Columns are scaled to
/// unit variance.
pub fn pca_scores(y: &DMatrix<f64>, q: usize) -> Result<DMatrix<f64>> {
    let (n, p) = y.shape();
    if q > n.min(p) {
        return Err(Error::Argument(format!(
            "latent dimension {q} exceeds min(n, p) = {} required for PCA",
            n.min(p)
        )));
    }
    let col_means = y.row_mean();
    let mut centred = y.clone();
    for i in 0..n {
        for j in 0..p {
            centred[(i, j)] -= col_means[j];
        }
    }
    let gram = &centred * centred.transpose();
    let eig = nalgebra::SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].partial_cmp(&eig.eigenvalues[*a]).unwrap());
    let max_eig = eig.eigenvalues[order[0]].max(f64::MIN_POSITIVE);
    let mut scores = DMatrix::zeros(n, q);
    for (col, &k) in order.iter().take(q).enumerate() {
        let lambda = eig.eigenvalues[k].max(0.0);
        if lambda > 1e-12 * max_eig {
            // u sqrt(lambda) has variance lambda/n; rescale to unit variance.
            let scale = (n as f64).sqrt();
            scores.column_mut(col).copy_from(&(eig.eigenvectors.column(k) * scale));
        }
        // Degenerate directions stay at zero; initialise() adds jitter.
    }
    Ok(scores)
}

/// Build an initial model: PCA latent means, neutral variances, inducing
/// inputs drawn from the latent means, ARD weights near 1/q, and
/// `beta = 100 / var(Y)`.
pub fn initialize(
    y: DMatrix<f64>,
    mut kernel_f: Kernel,
    prior: LatentPrior,
    config: &TrainConfig,
) -> Result<Model> {
    config.validate()?;
    let (n, p) = y.shape();
    if n < 2 {
        return Err(Error::Argument("need at least two data points".into()));
    }
    let q = config.latent_dim;
    let m = config.num_inducing;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mean = match &prior {
        LatentPrior::UncertainInput { z, .. } => {
            if z.shape() != (n, q) {
                return Err(Error::Argument(format!(
                    "uncertain-input prior means are {:?}, expected ({n}, {q})",
                    z.shape()
                )));
            }
            z.clone()
        }
        _ => {
            let mut scores = pca_scores(&y, q)?;
            for j in 0..q {
                if scores.column(j).amax() == 0.0 {
                    for i in 0..n {
                        scores[(i, j)] = 1e-3 * (rng.gen::<f64>() - 0.5);
                    }
                }
            }
            scores
        }
    };

    // ARD weights initialised near 1/q with a small seeded jitter.
    if let Some((offset, weights)) = kernel_f.ard_weights() {
        let mut params = kernel_f.params_flat();
        for (j, slot) in params[offset..offset + weights.len()].iter_mut().enumerate() {
            let _ = j;
            *slot = (1.0 / q as f64) * (1.0 + 0.01 * (rng.gen::<f64>() - 0.5));
        }
        kernel_f.set_params_flat(&params);
    }

    // Inducing inputs: a random subset of the latent means.
    let xu = if m <= n {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx.truncate(m);
        idx.sort_unstable();
        DMatrix::from_fn(m, q, |r, c| mean[(idx[r], c)])
    } else {
        // More inducing points than data: every row plus perturbed copies.
        DMatrix::from_fn(m, q, |r, c| {
            if r < n {
                mean[(r, c)]
            } else {
                mean[(r % n, c)] + 0.1 * (rng.gen::<f64>() - 0.5)
            }
        })
    };

    let col_means = y.row_mean();
    let mut var_y = 0.0;
    for i in 0..n {
        for j in 0..p {
            let d = y[(i, j)] - col_means[j];
            var_y += d * d;
        }
    }
    var_y /= (n * p) as f64;
    let beta = 100.0 / var_y.max(1e-12);

    let q_dist = match &prior {
        LatentPrior::Temporal { kernel, times, seq_starts } => {
            let kx = build_temporal_cov(kernel, times, seq_starts)?;
            let (chol, _) = jittered_cholesky(&kx, "Kx")?;
            let mut mu_bar = mean.clone();
            chol.solve_mut(&mut mu_bar);
            let lambda = DMatrix::repeat(n, q, 1.0 / config.init_variance);
            QDist::Dynamical(DynamicalQ::new(mu_bar, lambda)?)
        }
        _ => {
            let var = DMatrix::repeat(n, q, config.init_variance);
            QDist::Factorized(FactorizedQ::new(mean, var)?)
        }
    };

    let mut model = Model::new(kernel_f, prior, q_dist, xu, beta, OutputData::from_raw(y))?;
    model.fix_xu = config.fix_inducing;
    Ok(model)
}

/// Bound and noise-precision values at the accepted optimiser steps.
#[derive(Debug, Clone)]
pub struct TrainTrace {
    pub bound: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Staged training: first `fixed_beta_iters` with β frozen, then the
/// `main_iters` stages jointly. Returns the bound trace at accepted steps.
pub fn train(model: &mut Model, config: &TrainConfig) -> Result<TrainTrace> {
    config.validate()?;
    let mut trace: Vec<f64> = Vec::new();
    let mut beta_trace: Vec<f64> = Vec::new();
    let stages: Vec<(bool, usize)> = std::iter::once((true, config.fixed_beta_iters))
        .chain(config.main_iters.iter().map(|it| (false, *it)))
        .collect();
    let initial_bound = model.lower_bound()?;
    let fix_beta_outer = model.fix_beta;
    for (freeze_beta, iters) in stages {
        if iters == 0 {
            continue;
        }
        model.fix_beta = freeze_beta || fix_beta_outer;
        let x0 = pack(model);
        let mut scratch = model.clone();
        let mut objective = |x: &nalgebra::DVector<f64>| {
            unpack(&mut scratch, x);
            let (f, g) = bound_and_packed_gradient(&scratch)?;
            Ok((-f, -g))
        };
        let opts = OptimOptions {
            max_iters: iters,
            grad_tol: config.grad_tol,
            f_tol: config.f_tol,
            record_points: true,
            ..Default::default()
        };
        let result = minimize(&mut objective, x0, &opts)?;
        unpack(model, &result.x);
        let stage_trace: Vec<f64> = result.trace.iter().map(|f| -f).collect();
        let mut probe = model.clone();
        let stage_beta: Vec<f64> = result
            .points
            .as_ref()
            .unwrap()
            .iter()
            .map(|x| {
                unpack(&mut probe, x);
                probe.beta
            })
            .collect();
        let skip = usize::from(!trace.is_empty());
        trace.extend(stage_trace.into_iter().skip(skip));
        beta_trace.extend(stage_beta.into_iter().skip(skip));
    }
    model.fix_beta = fix_beta_outer;
    if trace.is_empty() {
        trace.push(initial_bound);
        beta_trace.push(model.beta);
    }
    let final_bound = *trace.last().unwrap();
    if final_bound < initial_bound - 1e-8 {
        return Err(Error::Numerical(format!(
            "bound decreased during training: {initial_bound} -> {final_bound}"
        )));
    }
    model.trace = trace.clone();
    Ok(TrainTrace { bound: trace, beta: beta_trace })
}

/// One row of the relevance report.
#[derive(Debug, Clone)]
pub struct ArdEntry {
    pub dimension: usize,
    pub weight: f64,
    pub normalized: f64,
}

#[derive(Debug, Clone)]
pub struct ArdReport {
    /// Sorted by weight, descending.
    pub entries: Vec<ArdEntry>,
    /// Count of dimensions whose weight is at least 1% of the maximum.
    pub effective_dim: usize,
}

/// Inspect the ARD weights of the mapping kernel.
pub fn ard_report(model: &Model) -> Result<ArdReport> {
    let (_, weights) = model
        .kernel_f
        .ard_weights()
        .ok_or_else(|| Error::Capability("mapping kernel has no ARD weights".into()))?;
    let max = weights.iter().cloned().fold(f64::MIN, f64::max);
    let mut entries: Vec<ArdEntry> = weights
        .iter()
        .enumerate()
        .map(|(dimension, &weight)| ArdEntry { dimension, weight, normalized: weight / max })
        .collect();
    entries.sort_by(|a, b| b.weight.partial_cmp(&a.weight).unwrap());
    let effective_dim = entries.iter().filter(|e| e.weight >= 0.01 * max).count();
    Ok(ArdReport { entries, effective_dim })
}
