//! Model persistence as versioned JSON.
//!
//! Arrays are row-major, written either as decimal numbers or as base64
//! little-endian f64, selected by the top-level `precision` field.

use std::io::Write;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bound::OutputData;
use crate::error::{Error, Result};
use crate::kernel::{Kernel, KernelConfig};
use crate::model::{Model, QDist};
use crate::params::{schema, ParamSchema};
use crate::variational::{DynamicalQ, FactorizedQ, LatentPrior};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Decimal,
    Base64,
}

/// Row-major matrix payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrayJson {
    pub rows: usize,
    pub cols: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b64: Option<String>,
}

impl ArrayJson {
    fn encode(m: &DMatrix<f64>, precision: Precision) -> Self {
        let values: Vec<f64> = (0..m.nrows())
            .flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)]))
            .collect();
        match precision {
            Precision::Decimal => ArrayJson {
                rows: m.nrows(),
                cols: m.ncols(),
                data: Some(values),
                b64: None,
            },
            Precision::Base64 => {
                let mut bytes = Vec::with_capacity(values.len() * 8);
                for v in &values {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                ArrayJson {
                    rows: m.nrows(),
                    cols: m.ncols(),
                    data: None,
                    b64: Some(B64.encode(bytes)),
                }
            }
        }
    }

    fn decode(&self) -> Result<DMatrix<f64>> {
        let values: Vec<f64> = if let Some(data) = &self.data {
            data.clone()
        } else if let Some(b64) = &self.b64 {
            let bytes = B64
                .decode(b64)
                .map_err(|e| Error::Io(format!("invalid base64 array: {e}")))?;
            if bytes.len() % 8 != 0 {
                return Err(Error::Io("base64 array length is not a multiple of 8".into()));
            }
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        } else {
            return Err(Error::Io("array has neither 'data' nor 'b64'".into()));
        };
        if values.len() != self.rows * self.cols {
            return Err(Error::Io(format!(
                "array payload has {} values for shape {}x{}",
                values.len(),
                self.rows,
                self.cols
            )));
        }
        Ok(DMatrix::from_row_iterator(self.rows, self.cols, values))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum QDistJson {
    Factorized {
        mean: ArrayJson,
        var: ArrayJson,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fixed_mean: Option<Vec<bool>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fixed_var: Option<Vec<bool>>,
    },
    Dynamical {
        mu_bar: ArrayJson,
        lambda: ArrayJson,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PriorJson {
    Standard,
    Temporal {
        kernel_x: KernelConfig,
        times: ArrayJson,
        seq_starts: Vec<usize>,
    },
    Uncertain {
        z: ArrayJson,
        sigma_z: Vec<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputJson {
    pub p: usize,
    pub trace_yy: f64,
    pub factor: ArrayJson,
    pub raw: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelJson {
    pub format_version: u32,
    pub variant: String,
    pub n: usize,
    pub q: usize,
    pub m: usize,
    pub p: usize,
    pub precision: Precision,
    pub kernel_f: KernelConfig,
    pub beta: f64,
    pub xu: ArrayJson,
    pub q_dist: QDistJson,
    pub prior: PriorJson,
    pub output: OutputJson,
    pub fix_xu: bool,
    pub schema: ParamSchema,
    pub trace: Vec<f64>,
}

pub fn model_to_json(model: &Model, precision: Precision) -> ModelJson {
    let q_dist = match &model.q {
        QDist::Factorized(f) => QDistJson::Factorized {
            mean: ArrayJson::encode(&f.mean, precision),
            var: ArrayJson::encode(&f.var, precision),
            fixed_mean: f.fixed_mean.clone(),
            fixed_var: f.fixed_var.clone(),
        },
        QDist::Dynamical(d) => QDistJson::Dynamical {
            mu_bar: ArrayJson::encode(&d.mu_bar, precision),
            lambda: ArrayJson::encode(&d.lambda, precision),
        },
    };
    let prior = match &model.prior {
        LatentPrior::StandardNormal => PriorJson::Standard,
        LatentPrior::Temporal { kernel, times, seq_starts } => PriorJson::Temporal {
            kernel_x: kernel.to_config(),
            times: ArrayJson::encode(times, precision),
            seq_starts: seq_starts.clone(),
        },
        LatentPrior::UncertainInput { z, sigma_z } => PriorJson::Uncertain {
            z: ArrayJson::encode(z, precision),
            sigma_z: sigma_z.clone(),
        },
    };
    ModelJson {
        format_version: FORMAT_VERSION,
        variant: model.variant().name().to_string(),
        n: model.n(),
        q: model.latent_dim(),
        m: model.num_inducing(),
        p: model.output.p(),
        precision,
        kernel_f: model.kernel_f.to_config(),
        beta: model.beta,
        xu: ArrayJson::encode(&model.xu, precision),
        q_dist,
        prior,
        output: OutputJson {
            p: model.output.p(),
            trace_yy: model.output.trace_yy(),
            factor: ArrayJson::encode(model.output.factor(), precision),
            raw: model.output.raw().is_some(),
        },
        fix_xu: model.fix_xu,
        schema: schema(model),
        trace: model.trace.clone(),
    }
}

pub fn model_from_json(json: &ModelJson) -> Result<Model> {
    if json.format_version != FORMAT_VERSION {
        return Err(Error::Io(format!(
            "unsupported model format version {} (expected {FORMAT_VERSION})",
            json.format_version
        )));
    }
    let kernel_f = Kernel::from_config(&json.kernel_f)?;
    let q_dist = match &json.q_dist {
        QDistJson::Factorized { mean, var, fixed_mean, fixed_var } => {
            let mut f = FactorizedQ::new(mean.decode()?, var.decode()?)?;
            f.fixed_mean = fixed_mean.clone();
            f.fixed_var = fixed_var.clone();
            QDist::Factorized(f)
        }
        QDistJson::Dynamical { mu_bar, lambda } => {
            QDist::Dynamical(DynamicalQ::new(mu_bar.decode()?, lambda.decode()?)?)
        }
    };
    let prior = match &json.prior {
        PriorJson::Standard => LatentPrior::StandardNormal,
        PriorJson::Temporal { kernel_x, times, seq_starts } => LatentPrior::Temporal {
            kernel: Kernel::from_config(kernel_x)?,
            times: times.decode()?,
            seq_starts: seq_starts.clone(),
        },
        PriorJson::Uncertain { z, sigma_z } => {
            LatentPrior::uncertain(z.decode()?, sigma_z.clone())?
        }
    };
    let factor = json.output.factor.decode()?;
    let output = if json.output.raw {
        OutputData::from_raw(factor)
    } else {
        let mut data = OutputData::from_raw(factor);
        data.strip_raw();
        data
    };
    let mut model = Model::new(kernel_f, prior, q_dist, json.xu.decode()?, json.beta, output)?;
    model.fix_xu = json.fix_xu;
    model.trace = json.trace.clone();
    Ok(model)
}

pub fn save_model(path: &Path, model: &Model, precision: Precision) -> Result<()> {
    let json = model_to_json(model, precision);
    let text = serde_json::to_string_pretty(&json)
        .map_err(|e| Error::Io(format!("model serialisation failed: {e}")))?;
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::Io(format!("cannot create {}: {e}", path.display())))?;
    file.write_all(text.as_bytes())
        .map_err(|e| Error::Io(format!("cannot write {}: {e}", path.display())))?;
    file.write_all(b"\n").map_err(|e| Error::Io(e.to_string()))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("cannot read {}: {e}", path.display())))?;
    let json: ModelJson = serde_json::from_str(&text)
        .map_err(|e| Error::Io(format!("invalid model JSON in {}: {e}", path.display())))?;
    model_from_json(&json)
}
