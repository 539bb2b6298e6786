//! Covariance functions for the latent mapping and the temporal prior.
//!
//! A `Kernel` is a sum of primitive terms. Every positive hyperparameter can
//! be marked fixed, in which case the optimiser leaves it untouched. All
//! parameter gradients returned here are in natural (positive) space; the
//! parameter packing layer applies the log-space chain factor.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Primitive covariance families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelFamily {
    /// Exponentiated quadratic with one inverse-squared-lengthscale weight
    /// per input dimension.
    RbfArd,
    /// Linear kernel `xᵀ C x'` with diagonal positive `C`.
    LinearArd,
    /// Matérn 3/2 on the Euclidean distance.
    Matern32,
    /// Periodic exponentiated quadratic on scalar inputs.
    PeriodicRbf,
    /// Observation noise, contributes only on the diagonal of a self-gram.
    White,
    /// Constant offset.
    Bias,
}

impl KernelFamily {
    fn name(&self) -> &'static str {
        match self {
            KernelFamily::RbfArd => "rbfard",
            KernelFamily::LinearArd => "linard",
            KernelFamily::Matern32 => "matern32",
            KernelFamily::PeriodicRbf => "periodic",
            KernelFamily::White => "white",
            KernelFamily::Bias => "bias",
        }
    }
}

/// One summand of a kernel, with its positive parameters and fixed-mask.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelTerm {
    pub family: KernelFamily,
    /// Parameter layout:
    /// RbfArd `[variance, w_1..w_q]`, LinearArd `[c_1..c_q]`,
    /// Matern32 `[variance, lengthscale]`,
    /// PeriodicRbf `[variance, lengthscale, period]`,
    /// White `[white]`, Bias `[bias]`.
    pub params: Vec<f64>,
    pub fixed: Vec<bool>,
}

impl KernelTerm {
    fn new(family: KernelFamily, params: Vec<f64>) -> Self {
        let fixed = vec![false; params.len()];
        KernelTerm { family, params, fixed }
    }

    fn param_names(&self) -> Vec<String> {
        match self.family {
            KernelFamily::RbfArd => {
                let mut names = vec!["variance".to_string()];
                names.extend((1..self.params.len()).map(|j| format!("w{j}")));
                names
            }
            KernelFamily::LinearArd => {
                (1..=self.params.len()).map(|j| format!("c{j}")).collect()
            }
            KernelFamily::Matern32 => {
                vec!["variance".to_string(), "lengthscale".to_string()]
            }
            KernelFamily::PeriodicRbf => vec![
                "variance".to_string(),
                "lengthscale".to_string(),
                "period".to_string(),
            ],
            KernelFamily::White => vec!["white".to_string()],
            KernelFamily::Bias => vec!["bias".to_string()],
        }
    }

    /// Input dimensionality this term insists on, if any.
    fn input_dim(&self) -> Option<usize> {
        match self.family {
            KernelFamily::RbfArd => Some(self.params.len() - 1),
            KernelFamily::LinearArd => Some(self.params.len()),
            KernelFamily::PeriodicRbf => Some(1),
            _ => None,
        }
    }

    pub(crate) fn eval(&self, a: &[f64], b: &[f64], same_point: bool) -> f64 {
        match self.family {
            KernelFamily::RbfArd => {
                let var = self.params[0];
                let s: f64 = a
                    .iter()
                    .zip(b.iter())
                    .zip(&self.params[1..])
                    .map(|((x, y), w)| w * (x - y) * (x - y))
                    .sum();
                var * (-0.5 * s).exp()
            }
            KernelFamily::LinearArd => a
                .iter()
                .zip(b.iter())
                .zip(&self.params)
                .map(|((x, y), c)| c * x * y)
                .sum(),
            KernelFamily::Matern32 => {
                let var = self.params[0];
                let ell = self.params[1];
                let r = dist(a, b);
                let z = 3f64.sqrt() * r / ell;
                var * (1.0 + z) * (-z).exp()
            }
            KernelFamily::PeriodicRbf => {
                let var = self.params[0];
                let ell = self.params[1];
                let period = self.params[2];
                let s = (2.0 * std::f64::consts::PI / period * (a[0] - b[0])).sin();
                var * (-0.5 * s * s / ell).exp()
            }
            KernelFamily::White => {
                if same_point {
                    self.params[0]
                } else {
                    0.0
                }
            }
            KernelFamily::Bias => self.params[0],
        }
    }

    /// d eval / d params[idx] in natural space.
    fn param_grad(&self, a: &[f64], b: &[f64], same_point: bool, idx: usize) -> f64 {
        match self.family {
            KernelFamily::RbfArd => {
                let k = self.eval(a, b, same_point);
                if idx == 0 {
                    k / self.params[0]
                } else {
                    let d = a[idx - 1] - b[idx - 1];
                    -0.5 * d * d * k
                }
            }
            KernelFamily::LinearArd => a[idx] * b[idx],
            KernelFamily::Matern32 => {
                let var = self.params[0];
                let ell = self.params[1];
                let r = dist(a, b);
                let z = 3f64.sqrt() * r / ell;
                if idx == 0 {
                    (1.0 + z) * (-z).exp()
                } else {
                    3.0 * var * r * r / (ell * ell * ell) * (-z).exp()
                }
            }
            KernelFamily::PeriodicRbf => {
                let var = self.params[0];
                let ell = self.params[1];
                let period = self.params[2];
                let arg = 2.0 * std::f64::consts::PI / period * (a[0] - b[0]);
                let s = arg.sin();
                let k = var * (-0.5 * s * s / ell).exp();
                match idx {
                    0 => k / var,
                    1 => k * 0.5 * s * s / (ell * ell),
                    _ => {
                        k * s * arg.cos() * 2.0 * std::f64::consts::PI * (a[0] - b[0])
                            / (ell * period * period)
                    }
                }
            }
            KernelFamily::White => {
                if same_point {
                    1.0
                } else {
                    0.0
                }
            }
            KernelFamily::Bias => 1.0,
        }
    }

    /// d eval / d a[j], differentiating only the first argument.
    fn input_grad(&self, a: &[f64], b: &[f64], j: usize) -> Result<f64> {
        match self.family {
            KernelFamily::RbfArd => {
                let k = self.eval(a, b, false);
                let w = self.params[1 + j];
                Ok(-w * (a[j] - b[j]) * k)
            }
            KernelFamily::LinearArd => Ok(self.params[j] * b[j]),
            KernelFamily::White | KernelFamily::Bias => Ok(0.0),
            other => Err(Error::Capability(format!(
                "input gradients are not available for the {} kernel",
                other.name()
            ))),
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// A covariance function: a sum of one or more primitive terms.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub terms: Vec<KernelTerm>,
}

impl Kernel {
    pub fn rbf_ard(variance: f64, weights: &[f64]) -> Self {
        let mut params = vec![variance];
        params.extend_from_slice(weights);
        Kernel { terms: vec![KernelTerm::new(KernelFamily::RbfArd, params)] }
    }

    pub fn linear_ard(weights: &[f64]) -> Self {
        Kernel { terms: vec![KernelTerm::new(KernelFamily::LinearArd, weights.to_vec())] }
    }

    pub fn matern32(variance: f64, lengthscale: f64) -> Self {
        Kernel {
            terms: vec![KernelTerm::new(KernelFamily::Matern32, vec![variance, lengthscale])],
        }
    }

    pub fn periodic(variance: f64, lengthscale: f64, period: f64) -> Self {
        Kernel {
            terms: vec![KernelTerm::new(
                KernelFamily::PeriodicRbf,
                vec![variance, lengthscale, period],
            )],
        }
    }

    pub fn white(theta: f64) -> Self {
        Kernel { terms: vec![KernelTerm::new(KernelFamily::White, vec![theta])] }
    }

    pub fn bias(theta: f64) -> Self {
        Kernel { terms: vec![KernelTerm::new(KernelFamily::Bias, vec![theta])] }
    }

    /// Sum of kernels; nested sums are flattened.
    pub fn sum(parts: Vec<Kernel>) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::Argument("sum kernel needs at least one child".into()));
        }
        let terms = parts.into_iter().flat_map(|k| k.terms).collect();
        Ok(Kernel { terms })
    }

    /// Parse a mini-expression such as `"rbfard+white"` with default
    /// parameters for `input_dim`-dimensional inputs.
    pub fn parse_expr(expr: &str, input_dim: usize) -> Result<Self> {
        let mut terms = Vec::new();
        for part in expr.split('+') {
            let k = match part.trim() {
                "rbfard" => Kernel::rbf_ard(1.0, &vec![1.0; input_dim]),
                "rbf" => Kernel::rbf_ard(1.0, &vec![1.0; input_dim]),
                "linard" | "linear" => Kernel::linear_ard(&vec![1.0; input_dim]),
                "matern32" => Kernel::matern32(1.0, 1.0),
                "periodic" => Kernel::periodic(1.0, 1.0, 1.0),
                "white" => Kernel::white(1e-2),
                "bias" => Kernel::bias(1e-2),
                other => {
                    return Err(Error::Argument(format!("unknown kernel term '{other}'")))
                }
            };
            terms.extend(k.terms);
        }
        Ok(Kernel { terms })
    }

    /// Validate parameter positivity and the declared input dimensionality.
    pub fn validate(&self, input_dim: usize) -> Result<()> {
        for term in &self.terms {
            for (name, value) in term.param_names().iter().zip(&term.params) {
                if !(*value > 0.0) {
                    return Err(Error::State(format!(
                        "kernel parameter {name} of {} must be strictly positive, got {value}",
                        term.family.name()
                    )));
                }
            }
            if let Some(d) = term.input_dim() {
                if d != input_dim {
                    return Err(Error::Argument(format!(
                        "{} kernel declares {d} input dimensions, data has {input_dim}",
                        term.family.name()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.terms.iter().map(|t| t.params.len()).sum()
    }

    /// Qualified parameter names; unique across terms.
    pub fn param_names(&self) -> Vec<String> {
        let multi = self.terms.len() > 1;
        let mut names = Vec::new();
        for (t, term) in self.terms.iter().enumerate() {
            for n in term.param_names() {
                if multi {
                    names.push(format!("{t}.{}.{n}", term.family.name()));
                } else {
                    names.push(n);
                }
            }
        }
        names
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.terms.iter().flat_map(|t| t.params.iter().copied()).collect()
    }

    pub fn set_params_flat(&mut self, values: &[f64]) {
        debug_assert_eq!(values.len(), self.param_count());
        let mut off = 0;
        for term in &mut self.terms {
            let len = term.params.len();
            term.params.copy_from_slice(&values[off..off + len]);
            off += len;
        }
    }

    pub fn fixed_flat(&self) -> Vec<bool> {
        self.terms.iter().flat_map(|t| t.fixed.iter().copied()).collect()
    }

    /// Mark a named parameter fixed (excluded from optimisation).
    pub fn set_fixed(&mut self, name: &str, fixed: bool) -> Result<()> {
        let names = self.param_names();
        let idx = names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Argument(format!("unknown kernel parameter '{name}'")))?;
        let mut off = 0;
        for term in &mut self.terms {
            if idx < off + term.fixed.len() {
                term.fixed[idx - off] = fixed;
                return Ok(());
            }
            off += term.fixed.len();
        }
        unreachable!()
    }

    /// ARD weights of the first term that has them, with their flat offsets.
    pub fn ard_weights(&self) -> Option<(usize, Vec<f64>)> {
        let mut off = 0;
        for term in &self.terms {
            match term.family {
                KernelFamily::RbfArd => return Some((off + 1, term.params[1..].to_vec())),
                KernelFamily::LinearArd => return Some((off, term.params.clone())),
                _ => {}
            }
            off += term.params.len();
        }
        None
    }

    fn check_dims(&self, x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<()> {
        if x1.ncols() != x2.ncols() {
            return Err(Error::Argument(format!(
                "kernel inputs have {} and {} columns",
                x1.ncols(),
                x2.ncols()
            )));
        }
        self.validate(x1.ncols())
    }

    fn eval_point(&self, a: &[f64], b: &[f64], same_point: bool) -> f64 {
        self.terms.iter().map(|t| t.eval(a, b, same_point)).sum()
    }

    /// Cross-covariance matrix `K[i,k] = k(x1_i, x2_k)`. White noise
    /// contributes on the diagonal only when `x1` and `x2` are the identical
    /// point set.
    pub fn matrix(&self, x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dims(x1, x2)?;
        if x1.nrows() == x2.nrows() && x1 == x2 {
            return self.matrix_self(x1);
        }
        let (n1, n2) = (x1.nrows(), x2.nrows());
        let r1 = rows(x1);
        let r2 = rows(x2);
        let mut out = DMatrix::zeros(n1, n2);
        for i in 0..n1 {
            for k in 0..n2 {
                out[(i, k)] = self.eval_point(&r1[i], &r2[k], false);
            }
        }
        Ok(out)
    }

    /// Symmetric self-covariance `k(X, X)`, including white-noise diagonal.
    pub fn matrix_self(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dims(x, x)?;
        let n = x.nrows();
        let r = rows(x);
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            out[(i, i)] = self.eval_point(&r[i], &r[i], true);
            for k in (i + 1)..n {
                let v = self.eval_point(&r[i], &r[k], false);
                out[(i, k)] = v;
                out[(k, i)] = v;
            }
        }
        Ok(out)
    }

    /// Diagonal of the self-covariance.
    pub fn diag_self(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.check_dims(x, x)?;
        let r = rows(x);
        Ok(r.iter().map(|p| self.eval_point(p, p, true)).collect())
    }

    /// Elementwise `∂K/∂param` for the flat parameter index, natural space.
    pub fn param_grad_matrix(
        &self,
        x1: &DMatrix<f64>,
        x2: &DMatrix<f64>,
        param: usize,
    ) -> Result<DMatrix<f64>> {
        self.check_dims(x1, x2)?;
        if param >= self.param_count() {
            return Err(Error::Argument(format!(
                "kernel parameter index {param} out of range ({} parameters)",
                self.param_count()
            )));
        }
        let same_set = x1.nrows() == x2.nrows() && x1 == x2;
        let (term, idx) = self.locate(param);
        let r1 = rows(x1);
        let r2 = rows(x2);
        let mut out = DMatrix::zeros(x1.nrows(), x2.nrows());
        for i in 0..x1.nrows() {
            for k in 0..x2.nrows() {
                let same_point = same_set && i == k;
                out[(i, k)] = term.param_grad(&r1[i], &r2[k], same_point, idx);
            }
        }
        Ok(out)
    }

    fn locate(&self, param: usize) -> (&KernelTerm, usize) {
        let mut off = 0;
        for term in &self.terms {
            if param < off + term.params.len() {
                return (term, param - off);
            }
            off += term.params.len();
        }
        unreachable!()
    }

    /// Contract a symmetric factor `G` against the self-gram gradients:
    /// returns `dθ_a = Σ_{ik} G[i,k] ∂K[i,k]/∂θ_a` and, when requested,
    /// `dX[k,j] = 2 Σ_b G[k,b] ∂₁k(x_k, x_b)/∂x_{k,j}` (first-slot convention,
    /// valid because `K` is a self-gram and `G` is symmetric).
    pub fn contract_self_grad(
        &self,
        x: &DMatrix<f64>,
        g: &DMatrix<f64>,
        want_input_grads: bool,
    ) -> Result<(Vec<f64>, Option<DMatrix<f64>>)> {
        self.check_dims(x, x)?;
        let n = x.nrows();
        debug_assert_eq!(g.nrows(), n);
        let r = rows(x);
        let mut dparams = Vec::with_capacity(self.param_count());
        for (term, idx) in self.terms.iter().flat_map(|t| (0..t.params.len()).map(move |i| (t, i)))
        {
            let mut acc = 0.0;
            for i in 0..n {
                for k in 0..n {
                    acc += g[(i, k)] * term.param_grad(&r[i], &r[k], i == k, idx);
                }
            }
            dparams.push(acc);
        }
        let dinputs = if want_input_grads {
            let q = x.ncols();
            let mut dx = DMatrix::zeros(n, q);
            for term in &self.terms {
                if matches!(term.family, KernelFamily::White | KernelFamily::Bias) {
                    continue;
                }
                for k in 0..n {
                    for b in 0..n {
                        let gkb = g[(k, b)];
                        if gkb == 0.0 {
                            continue;
                        }
                        for j in 0..q {
                            dx[(k, j)] += 2.0 * gkb * term.input_grad(&r[k], &r[b], j)?;
                        }
                    }
                }
            }
            Some(dx)
        } else {
            None
        };
        Ok((dparams, dinputs))
    }
}

fn rows(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..x.nrows()).map(|i| x.row(i).iter().copied().collect()).collect()
}

/// JSON description of a kernel tree: `{family, params, fixed, children}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelConfig {
    pub family: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fixed: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<KernelConfig>,
}

impl Kernel {
    pub fn to_config(&self) -> KernelConfig {
        fn term_config(term: &KernelTerm) -> KernelConfig {
            let names = term.param_names();
            KernelConfig {
                family: term.family.name().to_string(),
                params: names.iter().cloned().zip(term.params.iter().copied()).collect(),
                fixed: names
                    .iter()
                    .zip(&term.fixed)
                    .filter(|(_, f)| **f)
                    .map(|(n, _)| n.clone())
                    .collect(),
                children: Vec::new(),
            }
        }
        if self.terms.len() == 1 {
            term_config(&self.terms[0])
        } else {
            KernelConfig {
                family: "sum".to_string(),
                params: BTreeMap::new(),
                fixed: Vec::new(),
                children: self.terms.iter().map(term_config).collect(),
            }
        }
    }

    pub fn from_config(config: &KernelConfig) -> Result<Self> {
        if config.family == "sum" {
            if config.children.is_empty() {
                return Err(Error::Argument("sum kernel needs at least one child".into()));
            }
            let parts = config
                .children
                .iter()
                .map(Kernel::from_config)
                .collect::<Result<Vec<_>>>()?;
            return Kernel::sum(parts);
        }
        let get = |name: &str, default: Option<f64>| -> Result<f64> {
            config.params.get(name).copied().or(default).ok_or_else(|| {
                Error::Argument(format!(
                    "kernel {} is missing parameter '{name}'",
                    config.family
                ))
            })
        };
        let mut kernel = match config.family.as_str() {
            "rbfard" | "rbf" => {
                let variance = get("variance", Some(1.0))?;
                let mut weights = Vec::new();
                let mut j = 1;
                while let Some(w) = config.params.get(&format!("w{j}")) {
                    weights.push(*w);
                    j += 1;
                }
                if weights.is_empty() {
                    return Err(Error::Argument(
                        "rbfard kernel needs ARD weights w1..wq".into(),
                    ));
                }
                Kernel::rbf_ard(variance, &weights)
            }
            "linard" | "linear" => {
                let mut weights = Vec::new();
                let mut j = 1;
                while let Some(c) = config.params.get(&format!("c{j}")) {
                    weights.push(*c);
                    j += 1;
                }
                if weights.is_empty() {
                    return Err(Error::Argument(
                        "linard kernel needs ARD weights c1..cq".into(),
                    ));
                }
                Kernel::linear_ard(&weights)
            }
            "matern32" => Kernel::matern32(get("variance", Some(1.0))?, get("lengthscale", Some(1.0))?),
            "periodic" => Kernel::periodic(
                get("variance", Some(1.0))?,
                get("lengthscale", Some(1.0))?,
                get("period", Some(1.0))?,
            ),
            "white" => Kernel::white(get("white", None)?),
            "bias" => Kernel::bias(get("bias", None)?),
            other => return Err(Error::Argument(format!("unknown kernel family '{other}'"))),
        };
        for name in &config.fixed {
            kernel.set_fixed(name, true)?;
        }
        Ok(kernel)
    }
}
