//! Command-line front end: training, prediction, benchmarks and model
//! persistence. Exit codes: 0 success, 2 argument error, 3 i/o error,
//! 4 numerical error.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

use vgplvm::data::{read_csv, read_matrix_csv, write_matrix_csv};
use vgplvm::kernel::Kernel;
use vgplvm::model::Variant;
use vgplvm::model_io::{load_model, save_model, Precision};
use vgplvm::predict::{
    autoregress_dataset, forecast, iterative_predict, log_density, reconstruct, PredictConfig,
};
use vgplvm::semisup::{
    semi_supervised_train, semisup_benchmark, BenchmarkConfig, PartialInputs, SemiSupConfig,
};
use vgplvm::train::{ard_report, initialize, train, TrainConfig};
use vgplvm::variational::LatentPrior;
use vgplvm::Error;

#[derive(Parser)]
#[command(name = "vgplvm", version, about = "Variational Bayesian GP-LVM training and prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to an output CSV and write model + trace + ARD report.
    Train(TrainArgs),
    /// Reconstruct the missing columns of partially observed test rows.
    Reconstruct(ReconstructArgs),
    /// Predict outputs at future timestamps of a dynamical model.
    Forecast(ForecastArgs),
    /// Per-row approximate log densities of fully observed test rows.
    Density(DensityArgs),
    /// Reformat a series into auto-regressive windows; optionally run
    /// iterative predictions with a trained uncertain-input model.
    Autoregress(AutoregressArgs),
    /// Semi-supervised training with partially observed inputs, or the
    /// synthetic benchmark table.
    Semisup(SemisupArgs),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Plain-text key=value configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Rayon thread count (results are identical for any value).
    #[arg(long)]
    threads: Option<usize>,
    /// Random seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Output data CSV (rows = points, columns = features).
    #[arg(long)]
    data: Option<PathBuf>,
    /// The data CSV has a header row.
    #[arg(long)]
    header: bool,
    /// Model variant: static, dynamical or uncertain-input.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long = "latent-dim")]
    latent_dim: Option<usize>,
    #[arg(long)]
    inducing: Option<usize>,
    /// Joint-stage iteration counts, comma separated.
    #[arg(long)]
    iters: Option<String>,
    #[arg(long = "fixed-beta-iters")]
    fixed_beta_iters: Option<usize>,
    /// Mapping kernel expression, e.g. "rbfard+white".
    #[arg(long)]
    kernel: Option<String>,
    /// Temporal kernel expression for the dynamical variant.
    #[arg(long = "temporal-kernel")]
    temporal_kernel: Option<String>,
    /// Timestamp CSV (one column). Defaults to 0,1,2,... for dynamical runs.
    #[arg(long)]
    timestamps: Option<PathBuf>,
    /// Sequence start indices, comma separated (first must be 0).
    #[arg(long)]
    sequences: Option<String>,
    /// Observed-input CSV for the uncertain-input variant.
    #[arg(long)]
    inputs: Option<PathBuf>,
    /// Prior input variance for the uncertain-input variant.
    #[arg(long = "input-noise")]
    input_noise: Option<f64>,
    /// Freeze the inducing inputs.
    #[arg(long = "fix-inducing")]
    fix_inducing: bool,
    /// Model JSON output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Bound-trace CSV path (default: <out>.trace.csv).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// ARD report path (default: <out>.ard.txt).
    #[arg(long = "ard-report")]
    ard: Option<PathBuf>,
    /// Array encoding in the model JSON: decimal or base64.
    #[arg(long)]
    precision: Option<String>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Test CSV; empty fields mark the columns to reconstruct.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    header: bool,
    /// Timestamps for dynamical models.
    #[arg(long)]
    timestamps: Option<PathBuf>,
    /// Test-phase optimisation iterations.
    #[arg(long)]
    iters: Option<usize>,
    /// Leave observation noise out of the reported variances.
    #[arg(long = "no-noise")]
    no_noise: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ForecastArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Timestamp CSV of the points to forecast.
    #[arg(long)]
    timestamps: Option<PathBuf>,
    #[arg(long = "no-noise")]
    no_noise: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DensityArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Fully observed test CSV.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    header: bool,
    #[arg(long)]
    timestamps: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AutoregressArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Series CSV (rows in time order).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    header: bool,
    /// Window size.
    #[arg(long)]
    tau: Option<usize>,
    /// Windowed-dataset CSV output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trained uncertain-input model: run iterative predictions instead.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Number of iterative one-step predictions.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long = "no-noise")]
    no_noise: bool,
}

#[derive(Args)]
struct SemisupArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Input CSV with empty fields marking missing features.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output (target) CSV.
    #[arg(long)]
    targets: Option<PathBuf>,
    #[arg(long)]
    header: bool,
    #[arg(long)]
    inducing: Option<usize>,
    #[arg(long)]
    iters: Option<String>,
    #[arg(long = "fixed-beta-iters")]
    fixed_beta_iters: Option<usize>,
    /// Fully observed test-input CSV; writes predictions next to the model.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Prediction CSV path (with --test).
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Model JSON output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run the synthetic benchmark and write the MSE table to --out.
    #[arg(long)]
    benchmark: bool,
    /// Benchmark missing fractions, e.g. "0.1,0.5,1.0".
    #[arg(long)]
    missing: Option<String>,
    /// Benchmark seeds, e.g. "0,1,2,3".
    #[arg(long)]
    seeds: Option<String>,
    /// Benchmark sizes as observed,partial,test (default 40,60,100).
    #[arg(long)]
    sizes: Option<String>,
    #[arg(long = "input-dim")]
    input_dim: Option<usize>,
    #[arg(long = "output-dim")]
    output_dim: Option<usize>,
}

/// key=value configuration file; '#' starts a comment. Unknown keys are
/// rejected after all lookups.
struct ConfigFile {
    values: HashMap<String, String>,
}

impl ConfigFile {
    fn load(path: Option<&Path>) -> Result<Self, Error> {
        let mut values = HashMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Io(format!("cannot read {}: {e}", path.display())))?;
            for (idx, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap().trim();
                if line.is_empty() {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    Error::Argument(format!(
                        "{}: line {}: expected key=value",
                        path.display(),
                        idx + 1
                    ))
                })?;
                values.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(ConfigFile { values })
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, Error> {
        match self.values.remove(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::Argument(format!("config key '{key}' has invalid value '{raw}'"))
            }),
        }
    }

    fn finish(self) -> Result<(), Error> {
        if let Some(key) = self.values.keys().next() {
            return Err(Error::Argument(format!("unknown config key '{key}'")));
        }
        Ok(())
    }
}

fn resolve<T: FromStr>(
    flag: Option<T>,
    cfg: &mut ConfigFile,
    key: &str,
) -> Result<Option<T>, Error> {
    match flag {
        Some(v) => {
            // Flags override file values; still consume the key.
            let _ = cfg.take::<String>(key)?;
            Ok(Some(v))
        }
        None => cfg.take::<T>(key),
    }
}

fn require<T>(value: Option<T>, what: &str) -> Result<T, Error> {
    value.ok_or_else(|| Error::Argument(format!("missing required option --{what}")))
}

fn parse_list<T: FromStr>(raw: &str, what: &str) -> Result<Vec<T>, Error> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| Error::Argument(format!("invalid {what} entry '{s}'")))
        })
        .collect()
}

fn setup_threads(threads: Option<usize>) {
    if let Some(t) = threads.filter(|t| *t > 0) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Reconstruct(args) => cmd_reconstruct(args),
        Command::Forecast(args) => cmd_forecast(args),
        Command::Density(args) => cmd_density(args),
        Command::Autoregress(args) => cmd_autoregress(args),
        Command::Semisup(args) => cmd_semisup(args),
    };
    if let Err(err) = outcome {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}

fn parse_precision(raw: Option<String>) -> Result<Precision, Error> {
    match raw.as_deref() {
        None | Some("decimal") => Ok(Precision::Decimal),
        Some("base64") => Ok(Precision::Base64),
        Some(other) => Err(Error::Argument(format!(
            "unknown precision '{other}' (use decimal or base64)"
        ))),
    }
}

fn load_timestamps(path: &Path) -> Result<DMatrix<f64>, Error> {
    let t = read_matrix_csv(path, false)?;
    if t.ncols() != 1 {
        return Err(Error::Argument(format!(
            "timestamp file {} must have one column, found {}",
            path.display(),
            t.ncols()
        )));
    }
    Ok(t)
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let mut cfg = ConfigFile::load(args.common.config.as_deref())?;
    let data = require(resolve(args.data, &mut cfg, "data")?, "data")?;
    let out = require(resolve(args.out, &mut cfg, "out")?, "out")?;
    let variant = resolve(args.variant, &mut cfg, "variant")?.unwrap_or_else(|| "static".into());
    let latent_dim = resolve(args.latent_dim, &mut cfg, "latent-dim")?.unwrap_or(2);
    let inducing = resolve(args.inducing, &mut cfg, "inducing")?.unwrap_or(10);
    let iters_raw = resolve(args.iters, &mut cfg, "iters")?.unwrap_or_else(|| "500".into());
    let fixed_beta_iters =
        resolve(args.fixed_beta_iters, &mut cfg, "fixed-beta-iters")?.unwrap_or(100);
    let seed = resolve(args.common.seed, &mut cfg, "seed")?.unwrap_or(0);
    let kernel_expr =
        resolve(args.kernel, &mut cfg, "kernel")?.unwrap_or_else(|| "rbfard".into());
    let temporal_expr = resolve(args.temporal_kernel, &mut cfg, "temporal-kernel")?
        .unwrap_or_else(|| "rbf+white+bias".into());
    let timestamps = resolve(args.timestamps, &mut cfg, "timestamps")?;
    let sequences = resolve(args.sequences, &mut cfg, "sequences")?;
    let inputs = resolve(args.inputs, &mut cfg, "inputs")?;
    let input_noise = resolve(args.input_noise, &mut cfg, "input-noise")?.unwrap_or(1.0);
    let precision = parse_precision(resolve(args.precision, &mut cfg, "precision")?)?;
    let threads = resolve(args.common.threads, &mut cfg, "threads")?;
    cfg.finish()?;
    setup_threads(threads);

    let y = read_matrix_csv(&data, args.header)?;
    let n = y.nrows();
    let main_iters: Vec<usize> = parse_list(&iters_raw, "iters")?;
    let config = TrainConfig {
        latent_dim,
        num_inducing: inducing,
        fixed_beta_iters,
        main_iters,
        seed,
        fix_inducing: args.fix_inducing,
        ..Default::default()
    };
    if inducing > n {
        eprintln!("warning: {inducing} inducing points exceed the {n} data points");
    }

    let kernel = Kernel::parse_expr(&kernel_expr, latent_dim)?;
    let prior = match variant.as_str() {
        "static" => LatentPrior::StandardNormal,
        "dynamical" => {
            let times = match &timestamps {
                Some(path) => load_timestamps(path)?,
                None => DMatrix::from_fn(n, 1, |i, _| i as f64),
            };
            let seq_starts = match &sequences {
                Some(raw) => parse_list::<usize>(raw, "sequences")?,
                None => vec![0],
            };
            LatentPrior::Temporal {
                kernel: Kernel::parse_expr(&temporal_expr, times.ncols())?,
                times,
                seq_starts,
            }
        }
        "uncertain-input" => {
            let path = require(inputs, "inputs")?;
            let z = read_matrix_csv(&path, args.header)?;
            if z.ncols() != latent_dim {
                return Err(Error::Argument(format!(
                    "inputs have {} columns but latent-dim is {latent_dim}",
                    z.ncols()
                )));
            }
            LatentPrior::uncertain(z, vec![input_noise; latent_dim])?
        }
        other => {
            return Err(Error::Argument(format!(
                "unknown variant '{other}' (use static, dynamical or uncertain-input)"
            )))
        }
    };

    let mut model = initialize(y, kernel, prior, &config)?;
    let trace = train(&mut model, &config)?;
    save_model(&out, &model, precision)?;

    let trace_path = args
        .trace
        .unwrap_or_else(|| out.with_extension("trace.csv"));
    let trace_matrix = DMatrix::from_fn(trace.bound.len(), 3, |i, j| match j {
        0 => i as f64,
        1 => trace.bound[i],
        _ => trace.beta[i],
    });
    write_matrix_csv(
        &trace_path,
        Some(&["iter".into(), "bound".into(), "beta".into()]),
        &trace_matrix,
    )?;

    let ard_path = args.ard.unwrap_or_else(|| out.with_extension("ard.txt"));
    match ard_report(&model) {
        Ok(report) => {
            let mut text = String::from("dimension,weight,normalized\n");
            for e in &report.entries {
                text.push_str(&format!("{},{},{}\n", e.dimension, e.weight, e.normalized));
            }
            text.push_str(&format!("effective_dim,{}\n", report.effective_dim));
            std::fs::write(&ard_path, text)
                .map_err(|e| Error::Io(format!("cannot write {}: {e}", ard_path.display())))?;
        }
        Err(Error::Capability(_)) => {
            std::fs::write(&ard_path, "no ARD weights in the mapping kernel\n")
                .map_err(|e| Error::Io(format!("cannot write {}: {e}", ard_path.display())))?;
        }
        Err(e) => return Err(e),
    }
    println!(
        "trained {} model: n={} q={} m={} bound={:.6}",
        model.variant().name(),
        model.n(),
        model.latent_dim(),
        model.num_inducing(),
        model.lower_bound()?
    );
    Ok(())
}

fn cmd_reconstruct(args: ReconstructArgs) -> Result<(), Error> {
    let mut cfg = ConfigFile::load(args.common.config.as_deref())?;
    let model_path = require(resolve(args.model, &mut cfg, "model")?, "model")?;
    let test_path = require(resolve(args.test, &mut cfg, "test")?, "test")?;
    let out = require(resolve(args.out, &mut cfg, "out")?, "out")?;
    let iters = resolve(args.iters, &mut cfg, "iters")?.unwrap_or(200);
    let timestamps = resolve(args.timestamps, &mut cfg, "timestamps")?;
    let threads = resolve(args.common.threads, &mut cfg, "threads")?;
    cfg.finish()?;
    setup_threads(threads);

    let model = load_model(&model_path)?;
    let table = read_csv(&test_path, args.header)?;
    if table.ncols() != model.output.p() {
        return Err(Error::Argument(format!(
            "test file has {} columns, model outputs have {}",
            table.ncols(),
            model.output.p()
        )));
    }
    let observed = table.shared_observed_columns()?;
    if observed.len() == table.ncols() {
        return Err(Error::Argument(
            "test file is fully observed; use the density command instead".into(),
        ));
    }
    let (values, _) = table.to_matrix_with_mask();
    let evidence = DMatrix::from_fn(table.nrows(), observed.len(), |i, j| {
        values[(i, observed[j])]
    });
    let t_star = match &timestamps {
        Some(path) => Some(load_timestamps(path)?),
        None => None,
    };
    let config = PredictConfig { iters, ..Default::default() };
    let result = reconstruct(
        &evidence,
        &observed,
        &model,
        t_star.as_ref(),
        &config,
        !args.no_noise,
    )?;
    let missing: Vec<usize> =
        (0..table.ncols()).filter(|c| !observed.contains(c)).collect();
    let mut header: Vec<String> = missing.iter().map(|c| format!("mean_{c}")).collect();
    header.extend(missing.iter().map(|c| format!("var_{c}")));
    let k = missing.len();
    let out_matrix = DMatrix::from_fn(table.nrows(), 2 * k, |i, j| {
        if j < k {
            result.moments.mean[(i, j)]
        } else {
            result.moments.var[(i, j - k)]
        }
    });
    write_matrix_csv(&out, Some(&header), &out_matrix)?;
    println!("reconstructed {} rows x {} columns", table.nrows(), k);
    Ok(())
}

fn cmd_forecast(args: ForecastArgs) -> Result<(), Error> {
    let mut cfg = ConfigFile::load(args.common.config.as_deref())?;
    let model_path = require(resolve(args.model, &mut cfg, "model")?, "model")?;
    let times_path = require(resolve(args.timestamps, &mut cfg, "timestamps")?, "timestamps")?;
    let out = require(resolve(args.out, &mut cfg, "out")?, "out")?;
    let threads = resolve(args.common.threads, &mut cfg, "threads")?;
    cfg.finish()?;
    setup_threads(threads);

    let model = load_model(&model_path)?;
    let t_star = load_timestamps(&times_path)?;
    let (latent, moments) = forecast(&t_star, &model, !args.no_noise)?;
    let q = latent.mean.ncols();
    let p = moments.mean.ncols();
    let mut header: Vec<String> = (0..q).map(|j| format!("latent_mean_{j}")).collect();
    header.extend((0..q).map(|j| format!("latent_var_{j}")));
    header.extend((0..p).map(|j| format!("mean_{j}")));
    header.extend((0..p).map(|j| format!("var_{j}")));
    let out_matrix = DMatrix::from_fn(t_star.nrows(), 2 * q + 2 * p, |i, j| {
        if j < q {
            latent.mean[(i, j)]
        } else if j < 2 * q {
            latent.var[(i, j - q)]
        } else if j < 2 * q + p {
            moments.mean[(i, j - 2 * q)]
        } else {
            moments.var[(i, j - 2 * q - p)]
        }
    });
    write_matrix_csv(&out, Some(&header), &out_matrix)?;
    println!("forecast {} timestamps", t_star.nrows());
    Ok(())
}

fn cmd_density(args: DensityArgs) -> Result<(), Error> {
    let mut cfg = ConfigFile::load(args.common.config.as_deref())?;
    let model_path = require(resolve(args.model, &mut cfg, "model")?, "model")?;
    let test_path = require(resolve(args.test, &mut cfg, "test")?, "test")?;
    let out = require(resolve(args.out, &mut cfg, "out")?, "out")?;
    let iters = resolve(args.iters, &mut cfg, "iters")?.unwrap_or(150);
    let timestamps = resolve(args.timestamps, &mut cfg, "timestamps")?;
    let threads = resolve(args.common.threads, &mut cfg, "threads")?;
    cfg.finish()?;
    setup_threads(threads);

    let model = load_model(&model_path)?;
    let y_star = read_matrix_csv(&test_path, args.header)?;
    let t_star = match &timestamps {
        Some(path) => Some(load_timestamps(path)?),
        None => None,
    };
    let config = PredictConfig { iters, ..Default::default() };
    let mut values = DMatrix::zeros(y_star.nrows(), 2);
    for i in 0..y_star.nrows() {
        let row = y_star.rows(i, 1).into_owned();
        let t_row = t_star.as_ref().map(|t| t.rows(i, 1).into_owned());
        let ld = log_density(&row, &model, t_row.as_ref(), &config)?;
        values[(i, 0)] = i as f64;
        values[(i, 1)] = ld;
    }
    write_matrix_csv(&out, Some(&["row".into(), "log_density".into()]), &values)?;
    println!("scored {} rows", y_star.nrows());
    Ok(())
}

fn cmd_autoregress(args: AutoregressArgs) -> Result<(), Error> {
    let mut cfg = ConfigFile::load(args.common.config.as_deref())?;
    let out = require(resolve(args.out, &mut cfg, "out")?, "out")?;
    let model_path = resolve(args.model, &mut cfg, "model")?;
    let steps = resolve(args.steps, &mut cfg, "steps")?;
    let threads = resolve(args.common.threads, &mut cfg, "threads")?;

    if let Some(model_path) = model_path {
        let steps = require(steps, "steps")?;
        cfg.finish()?;
        setup_threads(threads);
        let model = load_model(&model_path)?;
        if model.variant() != Variant::UncertainInput {
            return Err(Error::Capability(
                "iterative prediction needs an uncertain-input model".into(),
            ));
        }
        let moments = iterative_predict(&model, steps, !args.no_noise)?;
        let p = moments.mean.ncols();
        let mut header: Vec<String> = (0..p).map(|j| format!("mean_{j}")).collect();
        header.extend((0..p).map(|j| format!("var_{j}")));
        let out_matrix = DMatrix::from_fn(steps, 2 * p, |i, j| {
            if j < p {
                moments.mean[(i, j)]
            } else {
                moments.var[(i, j - p)]
            }
        });
        write_matrix_csv(&out, Some(&header), &out_matrix)?;
        println!("predicted {steps} steps ahead");
        return Ok(());
    }

    let data = require(resolve(args.data, &mut cfg, "data")?, "data")?;
    let tau = require(resolve(args.tau, &mut cfg, "tau")?, "tau")?;
    cfg.finish()?;
    let y = read_matrix_csv(&data, args.header)?;
    let (zhat, yhat) = autoregress_dataset(&y, tau)?;
    let p = y.ncols();
    let mut header: Vec<String> = (0..tau * p).map(|j| format!("z_{j}")).collect();
    header.extend((0..p).map(|j| format!("y_{j}")));
    let rows = zhat.nrows();
    let out_matrix = DMatrix::from_fn(rows, tau * p + p, |i, j| {
        if j < tau * p {
            zhat[(i, j)]
        } else {
            yhat[(i, j - tau * p)]
        }
    });
    write_matrix_csv(&out, Some(&header), &out_matrix)?;
    println!("wrote {rows} windowed rows (tau = {tau})");
    Ok(())
}

fn cmd_semisup(args: SemisupArgs) -> Result<(), Error> {
    let mut cfg = ConfigFile::load(args.common.config.as_deref())?;
    let out = require(resolve(args.out, &mut cfg, "out")?, "out")?;
    let seed = resolve(args.common.seed, &mut cfg, "seed")?.unwrap_or(0);
    let inducing = resolve(args.inducing, &mut cfg, "inducing")?.unwrap_or(20);
    let iters_raw = resolve(args.iters, &mut cfg, "iters")?.unwrap_or_else(|| "200".into());
    let fixed_beta_iters =
        resolve(args.fixed_beta_iters, &mut cfg, "fixed-beta-iters")?.unwrap_or(50);
    let threads = resolve(args.common.threads, &mut cfg, "threads")?;
    let main_iters: Vec<usize> = parse_list(&iters_raw, "iters")?;

    let base = SemiSupConfig {
        train: TrainConfig {
            num_inducing: inducing,
            fixed_beta_iters,
            main_iters,
            seed,
            ..Default::default()
        },
        ..Default::default()
    };

    if args.benchmark {
        let missing = resolve(args.missing, &mut cfg, "missing")?
            .unwrap_or_else(|| "0.1,0.3,0.5,0.8,1.0".into());
        let seeds_raw = resolve(args.seeds, &mut cfg, "seeds")?.unwrap_or_else(|| "0,1,2,3".into());
        let sizes_raw = resolve(args.sizes, &mut cfg, "sizes")?.unwrap_or_else(|| "40,60,100".into());
        let input_dim = resolve(args.input_dim, &mut cfg, "input-dim")?.unwrap_or(15);
        let output_dim = resolve(args.output_dim, &mut cfg, "output-dim")?.unwrap_or(5);
        cfg.finish()?;
        setup_threads(threads);
        let sizes: Vec<usize> = parse_list(&sizes_raw, "sizes")?;
        if sizes.len() != 3 {
            return Err(Error::Argument("sizes must be observed,partial,test".into()));
        }
        let bench = BenchmarkConfig {
            n_observed: sizes[0],
            n_partial: sizes[1],
            n_test: sizes[2],
            input_dim,
            output_dim,
            missing_fractions: parse_list(&missing, "missing")?,
            seeds: parse_list(&seeds_raw, "seeds")?,
            config: base,
        };
        let rows = semisup_benchmark(&bench)?;
        let mut text = String::from("missing_fraction,method,mse,stderr\n");
        for r in &rows {
            text.push_str(&format!("{},{},{},{}\n", r.missing_fraction, r.method, r.mse, r.stderr));
        }
        std::fs::write(&out, text)
            .map_err(|e| Error::Io(format!("cannot write {}: {e}", out.display())))?;
        println!("benchmark table written with {} rows", rows.len());
        return Ok(());
    }

    let data = require(resolve(args.data, &mut cfg, "data")?, "data")?;
    let targets = require(resolve(args.targets, &mut cfg, "targets")?, "targets")?;
    let test = resolve(args.test, &mut cfg, "test")?;
    let predictions = resolve(args.predictions, &mut cfg, "predictions")?;
    cfg.finish()?;
    setup_threads(threads);

    let table = read_csv(&data, args.header)?;
    let (z, mask) = table.to_matrix_with_mask();
    let y = read_matrix_csv(&targets, args.header)?;
    let mut config = base;
    config.train.latent_dim = z.ncols();
    let partial = PartialInputs::new(z, mask)?;
    let (obs_rows, _) = partial.split_rows();
    if obs_rows.is_empty() {
        eprintln!("warning: no fully observed rows; degenerating to an unsupervised GP-LVM");
    }
    let fitted = semi_supervised_train(&partial, &y, &config)?;
    save_model(&out, &fitted.model, Precision::Decimal)?;

    if let Some(test_path) = test {
        let z_star = read_matrix_csv(&test_path, args.header)?;
        let moments = fitted.predict(&z_star, true)?;
        let p = moments.mean.ncols();
        let mut header: Vec<String> = (0..p).map(|j| format!("mean_{j}")).collect();
        header.extend((0..p).map(|j| format!("var_{j}")));
        let out_matrix = DMatrix::from_fn(z_star.nrows(), 2 * p, |i, j| {
            if j < p {
                moments.mean[(i, j)]
            } else {
                moments.var[(i, j - p)]
            }
        });
        let pred_path = predictions.unwrap_or_else(|| out.with_extension("predictions.csv"));
        write_matrix_csv(&pred_path, Some(&header), &out_matrix)?;
        println!("predictions written for {} test rows", z_star.nrows());
    }
    println!("semi-supervised model written to {}", out.display());
    Ok(())
}
