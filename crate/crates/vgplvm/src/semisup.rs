//! Semi-supervised GP regression with partially observed inputs.
//!
//! Training follows the three-step self-training scheme: fit an initial
//! model on the fully observed rows with q(X) clamped at the inputs, infer
//! the latent distribution of each partial row from its outputs, then train
//! on everything with the observed cells clamped throughout.

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::bound::OutputData;
use crate::datasets::gp_regression_dataset;
use crate::error::{Error, Result};
use crate::kernel::Kernel;
use crate::model::{Model, QDist};
use crate::predict::{infer_latent, predict_at_inputs, PredictConfig, PredictiveMoments, TestQ};
use crate::train::{train, TrainConfig};
use crate::variational::{FactorizedQ, LatentPrior};

/// Inputs with a per-cell observed mask (row-major, true = observed).
#[derive(Debug, Clone)]
pub struct PartialInputs {
    pub z: DMatrix<f64>,
    pub observed: Vec<bool>,
}

impl PartialInputs {
    pub fn new(z: DMatrix<f64>, observed: Vec<bool>) -> Result<Self> {
        if observed.len() != z.nrows() * z.ncols() {
            return Err(Error::Argument(format!(
                "observed mask has {} entries for a {}x{} input matrix",
                observed.len(),
                z.nrows(),
                z.ncols()
            )));
        }
        Ok(PartialInputs { z, observed })
    }

    pub fn fully_observed(z: DMatrix<f64>) -> Self {
        let len = z.nrows() * z.ncols();
        PartialInputs { z, observed: vec![true; len] }
    }

    fn is_observed(&self, i: usize, j: usize) -> bool {
        self.observed[i * self.z.ncols() + j]
    }

    fn row_fully_observed(&self, i: usize) -> bool {
        (0..self.z.ncols()).all(|j| self.is_observed(i, j))
    }

    /// Indices of fully observed rows and of partial rows.
    pub fn split_rows(&self) -> (Vec<usize>, Vec<usize>) {
        let mut observed = Vec::new();
        let mut partial = Vec::new();
        for i in 0..self.z.nrows() {
            if self.row_fully_observed(i) {
                observed.push(i);
            } else {
                partial.push(i);
            }
        }
        (observed, partial)
    }
}

#[derive(Debug, Clone)]
pub struct SemiSupConfig {
    pub train: TrainConfig,
    /// Clamping variance for observed cells.
    pub epsilon: f64,
    /// Iterations of the per-row latent inference in step B.
    pub infer_iters: usize,
}

impl Default for SemiSupConfig {
    fn default() -> Self {
        SemiSupConfig { train: TrainConfig::default(), epsilon: 1e-9, infer_iters: 100 }
    }
}

/// Per-column affine standardisation with its inverse.
#[derive(Debug, Clone)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fit on the cells selected by `mask` (None = all).
    pub fn fit(data: &DMatrix<f64>, mask: Option<&[bool]>) -> Self {
        let (n, p) = data.shape();
        let mut mean = vec![0.0; p];
        let mut std = vec![1.0; p];
        for j in 0..p {
            let mut sum = 0.0;
            let mut count = 0usize;
            for i in 0..n {
                if mask.map_or(true, |m| m[i * p + j]) {
                    sum += data[(i, j)];
                    count += 1;
                }
            }
            let m = if count > 0 { sum / count as f64 } else { 0.0 };
            let mut var = 0.0;
            for i in 0..n {
                if mask.map_or(true, |m2| m2[i * p + j]) {
                    var += (data[(i, j)] - m) * (data[(i, j)] - m);
                }
            }
            mean[j] = m;
            std[j] = if count > 1 { (var / count as f64).sqrt().max(1e-8) } else { 1.0 };
        }
        Standardizer { mean, std }
    }

    pub fn apply(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(data.nrows(), data.ncols(), |i, j| {
            (data[(i, j)] - self.mean[j]) / self.std[j]
        })
    }

    pub fn invert(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(data.nrows(), data.ncols(), |i, j| {
            data[(i, j)] * self.std[j] + self.mean[j]
        })
    }

    pub fn invert_variance(&self, var: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(var.nrows(), var.ncols(), |i, j| {
            var[(i, j)] * self.std[j] * self.std[j]
        })
    }
}

/// A trained semi-supervised model with the standardisation transforms.
#[derive(Debug, Clone)]
pub struct SemiSupervisedModel {
    pub model: Model,
    pub z_scaler: Standardizer,
    pub y_scaler: Standardizer,
}

impl SemiSupervisedModel {
    /// Predict outputs at fully observed inputs, in the original units.
    pub fn predict(&self, z_star: &DMatrix<f64>, include_noise: bool) -> Result<PredictiveMoments> {
        let zs = self.z_scaler.apply(z_star);
        let testq =
            TestQ { mean: zs.clone(), var: DMatrix::zeros(zs.nrows(), zs.ncols()) };
        let moments = predict_at_inputs(&self.model, &testq, include_noise)?;
        Ok(PredictiveMoments {
            mean: self.y_scaler.invert(&moments.mean),
            var: self.y_scaler.invert_variance(&moments.var),
            noise_included: moments.noise_included,
        })
    }
}

fn clamped_q(z: &DMatrix<f64>, epsilon: f64) -> FactorizedQ {
    let (n, q) = z.shape();
    let mut fq = FactorizedQ::new(z.clone(), DMatrix::repeat(n, q, epsilon)).unwrap();
    fq.fixed_mean = Some(vec![true; n * q]);
    fq.fixed_var = Some(vec![true; n * q]);
    fq
}

fn build_and_train(
    y: DMatrix<f64>,
    q_dist: FactorizedQ,
    config: &SemiSupConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Model> {
    let (n, q) = q_dist.mean.shape();
    let m = config.train.num_inducing.min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.truncate(m);
    idx.sort_unstable();
    let xu = DMatrix::from_fn(m, q, |r, c| q_dist.mean[(idx[r], c)]);
    let var_y = {
        let col_means = y.row_mean();
        let mut acc = 0.0;
        for i in 0..y.nrows() {
            for j in 0..y.ncols() {
                let d = y[(i, j)] - col_means[j];
                acc += d * d;
            }
        }
        (acc / (y.nrows() * y.ncols()) as f64).max(1e-12)
    };
    let weights = vec![1.0 / q as f64; q];
    let kernel = Kernel::rbf_ard(1.0, &weights);
    let mut model = Model::new(
        kernel,
        LatentPrior::StandardNormal,
        QDist::Factorized(q_dist),
        xu,
        100.0 / var_y,
        OutputData::from_raw(y),
    )?;
    train(&mut model, &config.train)?;
    Ok(model)
}

/// Algorithm: clamp the observed rows, train an initial model, infer the
/// latent distribution of each partial row from its outputs, then train on
/// everything with observed cells clamped.
pub fn semi_supervised_train(
    partial: &PartialInputs,
    y: &DMatrix<f64>,
    config: &SemiSupConfig,
) -> Result<SemiSupervisedModel> {
    if !(config.epsilon > 0.0) {
        return Err(Error::Argument("epsilon must be strictly positive".into()));
    }
    let (n, q) = partial.z.shape();
    if y.nrows() != n {
        return Err(Error::Argument(format!(
            "inputs have {n} rows, outputs {}",
            y.nrows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let (obs_rows, part_rows) = partial.split_rows();

    // Internal standardisation; the epsilon clamp assumes normalised inputs.
    let z_scaler = Standardizer::fit(&partial.z, Some(&partial.observed));
    let y_scaler = Standardizer::fit(y, None);
    let zs = z_scaler.apply(&partial.z);
    let ys = y_scaler.apply(y);

    // Step A: initial model on the fully observed rows.
    let model_o = if obs_rows.is_empty() {
        None
    } else {
        let z_o = DMatrix::from_fn(obs_rows.len(), q, |r, c| zs[(obs_rows[r], c)]);
        let y_o = DMatrix::from_fn(obs_rows.len(), ys.ncols(), |r, c| ys[(obs_rows[r], c)]);
        Some(build_and_train(y_o, clamped_q(&z_o, config.epsilon), config, &mut rng)?)
    };

    // Step B: initial q(X) for every row; partial rows get their missing
    // cells from latent inference under the initial model.
    let mut mean = DMatrix::zeros(n, q);
    let mut var = DMatrix::repeat(n, q, config.epsilon);
    let mut fixed = vec![false; n * q];
    for &i in &obs_rows {
        for j in 0..q {
            mean[(i, j)] = zs[(i, j)];
            fixed[i * q + j] = true;
        }
    }
    let infer_config = PredictConfig { iters: config.infer_iters, ..Default::default() };
    for &i in &part_rows {
        let inferred: Option<TestQ> = match &model_o {
            Some(m) => {
                let y_row = ys.rows(i, 1).into_owned();
                Some(infer_latent(&y_row, m, &infer_config)?)
            }
            None => None,
        };
        for j in 0..q {
            if partial.is_observed(i, j) {
                mean[(i, j)] = zs[(i, j)];
                var[(i, j)] = config.epsilon;
                fixed[i * q + j] = true;
            } else {
                match &inferred {
                    Some(tq) => {
                        mean[(i, j)] = tq.mean[(0, j)];
                        var[(i, j)] = tq.var[(0, j)].clamp(config.epsilon, 1.0);
                    }
                    None => {
                        // No observed rows at all: plain GP-LVM treatment of
                        // the missing cells.
                        mean[(i, j)] = 1e-3 * (rng.gen::<f64>() - 0.5);
                        var[(i, j)] = 1.0;
                    }
                }
            }
        }
    }

    // Step C: train on everything, fixed cells never updated.
    let mut q_full = FactorizedQ::new(mean, var)?;
    q_full.fixed_mean = Some(fixed.clone());
    q_full.fixed_var = Some(fixed);
    let model = build_and_train(ys, q_full, config, &mut rng)?;
    Ok(SemiSupervisedModel { model, z_scaler, y_scaler })
}

/// Configuration for the synthetic benchmark protocol.
#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub n_observed: usize,
    pub n_partial: usize,
    pub n_test: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Fractions of missing cells in the partial block.
    pub missing_fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub config: SemiSupConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            n_observed: 40,
            n_partial: 60,
            n_test: 100,
            input_dim: 15,
            output_dim: 5,
            missing_fractions: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            seeds: vec![0, 1, 2, 3],
            config: SemiSupConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkRow {
    pub missing_fraction: f64,
    pub method: String,
    pub mse: f64,
    pub stderr: f64,
}

/// Run the benchmark: GP-sampled inputs and outputs, a block of partially
/// observed inputs at each missing fraction, and four competitors. MSE is
/// reported on outputs standardised by the training statistics.
pub fn semisup_benchmark(bench: &BenchmarkConfig) -> Result<Vec<BenchmarkRow>> {
    let methods = ["semisup", "gp-observed", "nearest-neighbour", "mean"];
    let mut rows = Vec::new();
    for &fraction in &bench.missing_fractions {
        let mut per_method: Vec<Vec<f64>> = vec![Vec::new(); methods.len()];
        for &seed in &bench.seeds {
            let mses = benchmark_single(bench, fraction, seed)?;
            for (k, v) in mses.into_iter().enumerate() {
                per_method[k].push(v);
            }
        }
        for (k, name) in methods.iter().enumerate() {
            let vals = &per_method[k];
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / vals.len().max(1) as f64;
            let stderr = (var / vals.len() as f64).sqrt();
            rows.push(BenchmarkRow {
                missing_fraction: fraction,
                method: name.to_string(),
                mse: mean,
                stderr,
            });
        }
    }
    Ok(rows)
}

fn benchmark_single(bench: &BenchmarkConfig, fraction: f64, seed: u64) -> Result<[f64; 4]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = bench.n_observed + bench.n_partial + bench.n_test;
    let (z_all, y_all) =
        gp_regression_dataset(&mut rng, total, bench.input_dim, bench.output_dim, 0.05)?;
    // Shuffle rows so the splits are not index-correlated.
    let mut perm: Vec<usize> = (0..total).collect();
    perm.shuffle(&mut rng);
    let take = |rows: &[usize], src: &DMatrix<f64>| {
        DMatrix::from_fn(rows.len(), src.ncols(), |r, c| src[(rows[r], c)])
    };
    let obs_idx = &perm[..bench.n_observed];
    let part_idx = &perm[bench.n_observed..bench.n_observed + bench.n_partial];
    let test_idx = &perm[bench.n_observed + bench.n_partial..];
    let z_obs = take(obs_idx, &z_all);
    let y_obs = take(obs_idx, &y_all);
    let z_part = take(part_idx, &z_all);
    let y_part = take(part_idx, &y_all);
    let z_test = take(test_idx, &z_all);
    let y_test = take(test_idx, &y_all);

    // Mask cells of the partial block.
    let q = bench.input_dim;
    let n_train = bench.n_observed + bench.n_partial;
    let mut z_train = DMatrix::zeros(n_train, q);
    let mut mask = vec![true; n_train * q];
    z_train.rows_mut(0, bench.n_observed).copy_from(&z_obs);
    z_train.rows_mut(bench.n_observed, bench.n_partial).copy_from(&z_part);
    for i in 0..bench.n_partial {
        for j in 0..q {
            if rng.gen::<f64>() < fraction {
                let row = bench.n_observed + i;
                mask[row * q + j] = false;
                z_train[(row, j)] = 0.0;
            }
        }
    }
    let mut y_train = DMatrix::zeros(n_train, bench.output_dim);
    y_train.rows_mut(0, bench.n_observed).copy_from(&y_obs);
    y_train.rows_mut(bench.n_observed, bench.n_partial).copy_from(&y_part);

    let mut config = bench.config.clone();
    config.train.seed = seed;
    config.train.latent_dim = q;

    // Semi-supervised model on everything.
    let partial = PartialInputs::new(z_train, mask)?;
    let semisup = semi_supervised_train(&partial, &y_train, &config)?;

    // Plain GP on the observed block only.
    let obs_only = PartialInputs::fully_observed(z_obs.clone());
    let gp_obs = semi_supervised_train(&obs_only, &y_obs, &config)?;

    // MSE on outputs standardised by each model's own training statistics
    // would differ; use the observed-block scaler as the common reference.
    let reference = Standardizer::fit(&y_obs, None);
    let y_test_std = reference.apply(&y_test);
    let mse = |pred: &DMatrix<f64>| -> f64 {
        let pred_std = reference.apply(pred);
        (&pred_std - &y_test_std).iter().map(|v| v * v).sum::<f64>()
            / (y_test_std.nrows() * y_test_std.ncols()) as f64
    };

    let semi_pred = semisup.predict(&z_test, false)?.mean;
    let gp_pred = gp_obs.predict(&z_test, false)?.mean;

    // Nearest neighbour on the observed block.
    let z_scaler = Standardizer::fit(&z_obs, None);
    let z_obs_std = z_scaler.apply(&z_obs);
    let z_test_std = z_scaler.apply(&z_test);
    let mut nn_pred = DMatrix::zeros(bench.n_test, bench.output_dim);
    for i in 0..bench.n_test {
        let mut best = (0usize, f64::INFINITY);
        for r in 0..bench.n_observed {
            let d2 = (z_test_std.row(i) - z_obs_std.row(r)).norm_squared();
            if d2 < best.1 {
                best = (r, d2);
            }
        }
        nn_pred.row_mut(i).copy_from(&y_obs.row(best.0));
    }

    // Column-mean predictor.
    let col_means = y_obs.row_mean();
    let mean_pred =
        DMatrix::from_fn(bench.n_test, bench.output_dim, |_, j| col_means[j]);

    Ok([mse(&semi_pred), mse(&gp_pred), mse(&nn_pred), mse(&mean_pred)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_rows_classifies_masks() {
        let z = DMatrix::zeros(3, 2);
        let mask = vec![true, true, true, false, false, false];
        let partial = PartialInputs::new(z, mask).unwrap();
        let (obs, part) = partial.split_rows();
        assert_eq!(obs, vec![0]);
        assert_eq!(part, vec![1, 2]);
    }

    #[test]
    fn bad_epsilon_is_argument_error() {
        let partial = PartialInputs::fully_observed(DMatrix::zeros(4, 2));
        let y = DMatrix::zeros(4, 1);
        let config = SemiSupConfig { epsilon: 0.0, ..Default::default() };
        assert!(matches!(
            semi_supervised_train(&partial, &y, &config),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn standardizer_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = DMatrix::from_fn(10, 3, |_, _| rng.gen::<f64>() * 5.0 - 1.0);
        let s = Standardizer::fit(&data, None);
        let std = s.apply(&data);
        for j in 0..3 {
            assert!(std.column(j).mean().abs() < 1e-12);
        }
        let back = s.invert(&std);
        assert!((&back - &data).amax() < 1e-12);
    }

    #[test]
    fn fixed_cells_bit_identical_after_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (z, y) = gp_regression_dataset(&mut rng, 25, 3, 2, 0.05).unwrap();
        let mut mask = vec![true; 25 * 3];
        for i in 15..25 {
            mask[i * 3 + 1] = false;
        }
        let partial = PartialInputs::new(z.clone(), mask.clone()).unwrap();
        let config = SemiSupConfig {
            train: TrainConfig {
                latent_dim: 3,
                num_inducing: 8,
                fixed_beta_iters: 10,
                main_iters: vec![40],
                seed: 4,
                ..Default::default()
            },
            infer_iters: 30,
            ..Default::default()
        };
        let fitted = semi_supervised_train(&partial, &y, &config).unwrap();
        let zs = fitted.z_scaler.apply(&z);
        if let QDist::Factorized(fq) = &fitted.model.q {
            for i in 0..25 {
                for j in 0..3 {
                    if mask[i * 3 + j] {
                        assert_eq!(fq.mean[(i, j)], zs[(i, j)], "clamped mean moved");
                        assert_eq!(fq.var[(i, j)], config.epsilon, "clamped variance moved");
                    }
                }
            }
        } else {
            panic!("expected factorized q");
        }
    }
}
