//! Flat parameter vector: packing, unpacking and the gradient layout.
//!
//! All positive quantities (variances, lambdas, kernel parameters, beta) are
//! optimised in log space. The schema lists named blocks with offsets so any
//! optimiser can consume the vector; it is serialised with the model.
//! Fixed-masked coordinates are skipped on unpack and zeroed in gradients.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{bound_with_gradients, Model, QDist};
use crate::variational::LatentPrior;

/// One named block of the flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SchemaBlock {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Layout descriptor of the flat vector.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ParamSchema {
    pub blocks: Vec<SchemaBlock>,
    pub len: usize,
}

impl ParamSchema {
    pub fn block(&self, name: &str) -> Option<&SchemaBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

/// Build the layout for a model. Blocks appear in this order:
/// `q_mean` (means / mu-bar, row-major n×q), `q_var_log` (log variances /
/// log lambda), `xu` (row-major m×q), `theta_f_log`, `theta_x_log`
/// (dynamical only), `beta_log`.
pub fn schema(model: &Model) -> ParamSchema {
    let (n, q) = match &model.q {
        QDist::Factorized(f) => (f.n(), f.q()),
        QDist::Dynamical(d) => (d.n(), d.q()),
    };
    let m = model.xu.nrows();
    let mut blocks = Vec::new();
    let mut offset = 0;
    let push = |name: &str, len: usize, offset: &mut usize, blocks: &mut Vec<SchemaBlock>| {
        blocks.push(SchemaBlock { name: name.to_string(), offset: *offset, len });
        *offset += len;
    };
    push("q_mean", n * q, &mut offset, &mut blocks);
    push("q_var_log", n * q, &mut offset, &mut blocks);
    push("xu", m * q, &mut offset, &mut blocks);
    push("theta_f_log", model.kernel_f.param_count(), &mut offset, &mut blocks);
    if let LatentPrior::Temporal { kernel, .. } = &model.prior {
        push("theta_x_log", kernel.param_count(), &mut offset, &mut blocks);
    }
    push("beta_log", 1, &mut offset, &mut blocks);
    ParamSchema { blocks, len: offset }
}

/// Mask of coordinates excluded from optimisation (true = fixed).
pub fn fixed_mask(model: &Model) -> Vec<bool> {
    let layout = schema(model);
    let mut mask = vec![false; layout.len];
    let (mean_fixed, var_fixed, nq) = match &model.q {
        QDist::Factorized(f) => (f.fixed_mean.clone(), f.fixed_var.clone(), f.n() * f.q()),
        QDist::Dynamical(d) => (None, None, d.n() * d.q()),
    };
    if let Some(fm) = mean_fixed {
        mask[..nq].copy_from_slice(&fm);
    }
    if let Some(fv) = var_fixed {
        mask[nq..2 * nq].copy_from_slice(&fv);
    }
    let xu_block = layout.block("xu").unwrap();
    if model.fix_xu {
        for v in &mut mask[xu_block.offset..xu_block.offset + xu_block.len] {
            *v = true;
        }
    }
    let tf = layout.block("theta_f_log").unwrap();
    mask[tf.offset..tf.offset + tf.len].copy_from_slice(&model.kernel_f.fixed_flat());
    if let Some(tx) = layout.block("theta_x_log") {
        if let LatentPrior::Temporal { kernel, .. } = &model.prior {
            mask[tx.offset..tx.offset + tx.len].copy_from_slice(&kernel.fixed_flat());
        }
    }
    let beta = layout.block("beta_log").unwrap();
    mask[beta.offset] = model.fix_beta;
    mask
}

/// Read the current parameters into a flat vector.
pub fn pack(model: &Model) -> DVector<f64> {
    let layout = schema(model);
    let mut x = DVector::zeros(layout.len);
    let mut off = 0;
    match &model.q {
        QDist::Factorized(f) => {
            for i in 0..f.n() {
                for j in 0..f.q() {
                    x[off] = f.mean[(i, j)];
                    x[off + f.n() * f.q()] = f.var[(i, j)].ln();
                    off += 1;
                }
            }
            off += f.n() * f.q();
        }
        QDist::Dynamical(d) => {
            for i in 0..d.n() {
                for j in 0..d.q() {
                    x[off] = d.mu_bar[(i, j)];
                    x[off + d.n() * d.q()] = d.lambda[(i, j)].ln();
                    off += 1;
                }
            }
            off += d.n() * d.q();
        }
    }
    for k in 0..model.xu.nrows() {
        for j in 0..model.xu.ncols() {
            x[off] = model.xu[(k, j)];
            off += 1;
        }
    }
    for p in model.kernel_f.params_flat() {
        x[off] = p.ln();
        off += 1;
    }
    if let LatentPrior::Temporal { kernel, .. } = &model.prior {
        for p in kernel.params_flat() {
            x[off] = p.ln();
            off += 1;
        }
    }
    x[off] = model.beta.ln();
    x
}

/// Write a flat vector back into the model, skipping fixed coordinates.
pub fn unpack(model: &mut Model, x: &DVector<f64>) {
    let mask = fixed_mask(model);
    let mut off = 0;
    match &mut model.q {
        QDist::Factorized(f) => {
            let nq = f.n() * f.q();
            let (n, q) = f.mean.shape();
            for i in 0..n {
                for j in 0..q {
                    if !mask[off] {
                        f.mean[(i, j)] = x[off];
                    }
                    if !mask[off + nq] {
                        f.var[(i, j)] = clamped_exp(x[off + nq]);
                    }
                    off += 1;
                }
            }
            off += nq;
        }
        QDist::Dynamical(d) => {
            let nq = d.n() * d.q();
            let (n, q) = d.mu_bar.shape();
            for i in 0..n {
                for j in 0..q {
                    if !mask[off] {
                        d.mu_bar[(i, j)] = x[off];
                    }
                    if !mask[off + nq] {
                        d.lambda[(i, j)] = clamped_exp(x[off + nq]);
                    }
                    off += 1;
                }
            }
            off += nq;
        }
    }
    for k in 0..model.xu.nrows() {
        for j in 0..model.xu.ncols() {
            if !mask[off] {
                model.xu[(k, j)] = x[off];
            }
            off += 1;
        }
    }
    let mut theta = model.kernel_f.params_flat();
    for t in theta.iter_mut() {
        if !mask[off] {
            *t = clamped_exp(x[off]);
        }
        off += 1;
    }
    model.kernel_f.set_params_flat(&theta);
    if let LatentPrior::Temporal { kernel, .. } = &mut model.prior {
        let mut theta = kernel.params_flat();
        for t in theta.iter_mut() {
            if !mask[off] {
                *t = clamped_exp(x[off]);
            }
            off += 1;
        }
        kernel.set_params_flat(&theta);
    }
    if !mask[off] {
        model.beta = clamped_exp(x[off]);
    }
}

/// Exponential with the log argument clamped to a range that keeps every
/// positive parameter representable and strictly positive.
fn clamped_exp(x: f64) -> f64 {
    x.clamp(-40.0, 40.0).exp()
}

/// Evaluate the bound and its gradient in the flat unconstrained
/// parametrisation (log chain factors applied, fixed coordinates zeroed).
pub fn bound_and_packed_gradient(model: &Model) -> Result<(f64, DVector<f64>)> {
    let (value, grads) = bound_with_gradients(model)?;
    let layout = schema(model);
    let mask = fixed_mask(model);
    let mut g = DVector::zeros(layout.len);
    let mut off = 0;
    match &model.q {
        QDist::Factorized(f) => {
            let nq = f.n() * f.q();
            for i in 0..f.n() {
                for j in 0..f.q() {
                    g[off] = grads.dmean[(i, j)];
                    g[off + nq] = grads.dvar[(i, j)] * f.var[(i, j)];
                    off += 1;
                }
            }
            off += nq;
        }
        QDist::Dynamical(d) => {
            let nq = d.n() * d.q();
            for i in 0..d.n() {
                for j in 0..d.q() {
                    g[off] = grads.dmean[(i, j)];
                    g[off + nq] = grads.dvar[(i, j)] * d.lambda[(i, j)];
                    off += 1;
                }
            }
            off += nq;
        }
    }
    for k in 0..model.xu.nrows() {
        for j in 0..model.xu.ncols() {
            g[off] = grads.dxu[(k, j)];
            off += 1;
        }
    }
    for (t, dt) in model.kernel_f.params_flat().iter().zip(&grads.dtheta_f) {
        g[off] = dt * t;
        off += 1;
    }
    if let LatentPrior::Temporal { kernel, .. } = &model.prior {
        for (t, dt) in kernel.params_flat().iter().zip(&grads.dtheta_x) {
            g[off] = dt * t;
            off += 1;
        }
    }
    g[off] = grads.dbeta * model.beta;
    for (gi, fixed) in g.iter_mut().zip(&mask) {
        if *fixed {
            *gi = 0.0;
        }
    }
    Ok((value, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bound::OutputData;
    use crate::kernel::Kernel;
    use crate::variational::{DynamicalQ, FactorizedQ};
    use nalgebra::DMatrix;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn toy_static_model(rng: &mut ChaCha8Rng, n: usize, q: usize, m: usize, p: usize) -> Model {
        let mean = DMatrix::from_fn(n, q, |_, _| rng.gen::<f64>() - 0.5);
        let var = DMatrix::from_fn(n, q, |_, _| 0.2 + rng.gen::<f64>());
        let xu = DMatrix::from_fn(m, q, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        let y = DMatrix::from_fn(n, p, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        let kernel = Kernel::rbf_ard(1.0 + rng.gen::<f64>(), &vec![1.0; q]);
        Model::new(
            kernel,
            LatentPrior::StandardNormal,
            QDist::Factorized(FactorizedQ::new(mean, var).unwrap()),
            xu,
            1.5,
            OutputData::from_raw(y),
        )
        .unwrap()
    }

    fn toy_dynamical_model(rng: &mut ChaCha8Rng, n: usize, q: usize, m: usize, p: usize) -> Model {
        let mu_bar = DMatrix::from_fn(n, q, |_, _| rng.gen::<f64>() - 0.5);
        let lambda = DMatrix::from_fn(n, q, |_, _| 0.5 + rng.gen::<f64>());
        let xu = DMatrix::from_fn(m, q, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        let y = DMatrix::from_fn(n, p, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        let times = DMatrix::from_fn(n, 1, |i, _| i as f64 * 0.25);
        let kernel_x =
            Kernel::sum(vec![Kernel::rbf_ard(1.0, &[2.0]), Kernel::white(0.05)]).unwrap();
        Model::new(
            Kernel::rbf_ard(0.9, &vec![1.0; q]),
            LatentPrior::Temporal { kernel: kernel_x, times, seq_starts: vec![0] },
            QDist::Dynamical(DynamicalQ::new(mu_bar, lambda).unwrap()),
            xu,
            2.0,
            OutputData::from_raw(y),
        )
        .unwrap()
    }

    #[test]
    fn pack_unpack_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for model in [
            toy_static_model(&mut rng, 6, 2, 3, 4),
            toy_dynamical_model(&mut rng, 5, 2, 3, 4),
        ] {
            let x = pack(&model);
            let mut copy = model.clone();
            unpack(&mut copy, &x);
            let x2 = pack(&copy);
            assert!((x - x2).amax() < 1e-12);
        }
    }

    #[test]
    fn schema_covers_every_coordinate() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let model = toy_dynamical_model(&mut rng, 5, 2, 3, 4);
        let layout = schema(&model);
        let total: usize = layout.blocks.iter().map(|b| b.len).sum();
        assert_eq!(total, layout.len);
        assert_eq!(pack(&model).len(), layout.len);
        assert!(layout.block("theta_x_log").is_some());
    }

    fn fd_check(model: &Model, tolerance: f64) {
        let x0 = pack(model);
        let (_, g) = bound_and_packed_gradient(model).unwrap();
        let h = 1e-5;
        let mask = fixed_mask(model);
        for idx in 0..x0.len() {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp[idx] += h;
            xm[idx] -= h;
            let mut mp = model.clone();
            unpack(&mut mp, &xp);
            let mut mm = model.clone();
            unpack(&mut mm, &xm);
            let fp = mp.lower_bound().unwrap();
            let fm = mm.lower_bound().unwrap();
            let fd = (fp - fm) / (2.0 * h);
            if mask[idx] {
                assert_eq!(g[idx], 0.0, "fixed coordinate {idx} must have zero gradient");
                continue;
            }
            let denom = fd.abs().max(1e-8);
            assert!(
                (g[idx] - fd).abs() / denom < tolerance,
                "coordinate {idx}: analytic {} vs fd {fd}",
                g[idx]
            );
        }
    }

    #[test]
    fn static_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let model = toy_static_model(&mut rng, 6, 2, 3, 4);
        fd_check(&model, 1e-5);
    }

    #[test]
    fn dynamical_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let model = toy_dynamical_model(&mut rng, 5, 2, 3, 4);
        fd_check(&model, 1e-5);
    }

    #[test]
    fn uncertain_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let n = 6;
        let q = 2;
        let z = DMatrix::from_fn(n, q, |_, _| rng.gen::<f64>() - 0.5);
        let mean = &z + DMatrix::from_fn(n, q, |_, _| 0.1 * (rng.gen::<f64>() - 0.5));
        let var = DMatrix::from_fn(n, q, |_, _| 0.2 + rng.gen::<f64>());
        let xu = DMatrix::from_fn(3, q, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        let y = DMatrix::from_fn(n, 4, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        let model = Model::new(
            Kernel::rbf_ard(1.1, &[1.0, 1.0]),
            LatentPrior::uncertain(z, vec![0.8, 1.3]).unwrap(),
            QDist::Factorized(FactorizedQ::new(mean, var).unwrap()),
            xu,
            1.8,
            OutputData::from_raw(y),
        )
        .unwrap();
        fd_check(&model, 1e-5);
    }

    #[test]
    fn fixed_mask_zeroes_gradients_and_survives_unpack() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let mut model = toy_static_model(&mut rng, 5, 2, 3, 3);
        let n = 5;
        let q = 2;
        let mut fm = vec![false; n * q];
        fm[3] = true;
        let mut fv = vec![false; n * q];
        fv[7] = true;
        if let QDist::Factorized(f) = &mut model.q {
            f.fixed_mean = Some(fm);
            f.fixed_var = Some(fv);
        }
        model.kernel_f.set_fixed("variance", true).unwrap();
        model.fix_beta = true;

        let before_mean = match &model.q {
            QDist::Factorized(f) => f.mean[(1, 1)],
            _ => unreachable!(),
        };
        let before_var_entry = match &model.q {
            QDist::Factorized(f) => f.var[(3, 1)],
            _ => unreachable!(),
        };
        let before_kernel_var = model.kernel_f.params_flat()[0];
        let before_beta = model.beta;

        let (_, g) = bound_and_packed_gradient(&model).unwrap();
        let layout = schema(&model);
        assert_eq!(g[3], 0.0);
        assert_eq!(g[n * q + 7], 0.0);
        assert_eq!(g[layout.block("theta_f_log").unwrap().offset], 0.0);
        assert_eq!(g[layout.block("beta_log").unwrap().offset], 0.0);

        // Unpack a shifted vector: fixed entries must be bit-identical.
        let mut x = pack(&model);
        for v in x.iter_mut() {
            *v += 0.1;
        }
        unpack(&mut model, &x);
        match &model.q {
            QDist::Factorized(f) => {
                assert_eq!(f.mean[(1, 1)], before_mean);
                assert_eq!(f.var[(3, 1)], before_var_entry);
            }
            _ => unreachable!(),
        }
        assert_eq!(model.kernel_f.params_flat()[0], before_kernel_var);
        assert_eq!(model.beta, before_beta);
        // fixed (1,1) of mean means flat index 1*2+1 = 3 -> mean[(1,1)] kept.
    }

    /// Bound decreases when Svar is scaled far from a reasonable value.
    #[test]
    fn bound_decreases_when_variances_inflated() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let model = toy_static_model(&mut rng, 8, 2, 4, 3);
        let base = model.lower_bound().unwrap();
        let mut inflated = model.clone();
        if let QDist::Factorized(f) = &mut inflated.q {
            f.var.scale_mut(100.0);
        }
        assert!(inflated.lower_bound().unwrap() < base);
    }

    #[test]
    fn bound_invariant_to_data_point_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let model = toy_static_model(&mut rng, 6, 2, 3, 4);
        let base = model.lower_bound().unwrap();
        // Swap rows 0 and 3 of everything row-indexed.
        let mut permuted = model.clone();
        if let QDist::Factorized(f) = &mut permuted.q {
            f.mean.swap_rows(0, 3);
            f.var.swap_rows(0, 3);
        }
        let y = model.output.raw().unwrap().clone();
        let mut y_perm = y.clone();
        y_perm.swap_rows(0, 3);
        permuted.output = OutputData::from_raw(y_perm);
        let value = permuted.lower_bound().unwrap();
        assert!((value - base).abs() < 1e-9, "permutation changed bound: {base} vs {value}");
    }
}
