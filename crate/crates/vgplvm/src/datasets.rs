//! Synthetic data generators used by the benchmark protocols and tests.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kernel::Kernel;
use crate::linalg::jittered_cholesky;

/// One draw from N(0, 1) via Box-Muller.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Sample `p` independent GP functions over the rows of `x`, plus optional
/// i.i.d. observation noise.
pub fn sample_gp_outputs(
    rng: &mut ChaCha8Rng,
    kernel: &Kernel,
    x: &DMatrix<f64>,
    p: usize,
    noise_std: f64,
) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    let mut cov = kernel.matrix_self(x)?;
    for i in 0..n {
        cov[(i, i)] += 1e-9;
    }
    let (chol, _) = jittered_cholesky(&cov, "sample covariance")?;
    let l = chol.l();
    let mut y = DMatrix::zeros(n, p);
    for j in 0..p {
        let z = DVector::from_fn(n, |_, _| standard_normal(rng));
        let f = &l * z;
        for i in 0..n {
            y[(i, j)] = f[i] + noise_std * standard_normal(rng);
        }
    }
    Ok(y)
}

/// The Mackey-Glass delay-differential series
/// `dy/dt = 0.2 y(t-T) / (1 + y(t-T)^10) - 0.1 y(t)`, integrated by Euler
/// steps with 10 sub-steps per sample. `delay` is the chaos parameter T
/// (17 is the usual mildly chaotic setting).
pub fn mackey_glass(sample_len: usize, delay: usize, seed: u64) -> Vec<f64> {
    let delta_t = 10usize;
    let history_len = delay * delta_t;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history: std::collections::VecDeque<f64> = (0..history_len)
        .map(|_| 1.2 + 0.2 * (rng.gen::<f64>() - 0.5))
        .collect();
    let mut current = 1.2;
    let mut series = Vec::with_capacity(sample_len);
    for _ in 0..sample_len {
        for _ in 0..delta_t {
            let delayed = history.pop_front().unwrap();
            history.push_back(current);
            let last = *history.back().unwrap();
            current = last
                + (0.2 * delayed / (1.0 + delayed.powi(10)) - 0.1 * last) / delta_t as f64;
        }
        series.push(current);
    }
    series
}

/// Inputs-then-outputs GP draw for the semi-supervised benchmark: the input
/// columns are independent GP functions over an evenly spaced index, and the
/// outputs are GP functions of those inputs.
pub fn gp_regression_dataset(
    rng: &mut ChaCha8Rng,
    n: usize,
    input_dim: usize,
    output_dim: usize,
    noise_std: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let index = DMatrix::from_fn(n, 1, |i, _| i as f64 / n as f64 * 4.0);
    let input_kernel = Kernel::rbf_ard(1.0, &[1.0]);
    let z = sample_gp_outputs(rng, &input_kernel, &index, input_dim, 0.0)?;
    let weights = vec![1.0 / input_dim as f64; input_dim];
    let output_kernel = Kernel::rbf_ard(1.0, &weights);
    let y = sample_gp_outputs(rng, &output_kernel, &z, output_dim, noise_std)?;
    Ok((z, y))
}
