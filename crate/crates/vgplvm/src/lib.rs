//! Variational Bayesian Gaussian process latent variable models.
//!
//! The crate implements the sparse variational treatment of GP-LVMs with
//! inducing variables: analytic kernel expectations (ψ statistics) under a
//! Gaussian q(X), the closed-form evidence lower bound and its gradients,
//! the dynamical (temporal prior) and uncertain-input variants, training,
//! and the prediction suite (density ratios, partial-output reconstruction,
//! forecasting, uncertainty-propagating auto-regression, semi-supervised
//! input imputation).

pub mod bound;
pub mod data;
pub mod datasets;
pub mod error;
pub mod kernel;
pub mod linalg;
pub mod model;
pub mod model_io;
pub mod params;
pub mod parallel;
pub mod predict;
pub mod optim;
pub mod psi;
pub mod train;
pub mod quadrature;
pub mod semisup;
pub mod variational;

pub use error::{Error, Result};
pub use kernel::{Kernel, KernelConfig, KernelFamily};
pub use psi::{psi_statistics, psi_statistics_with_partials, PsiStats};
pub use quadrature::psi_quadrature_oracle;
pub use variational::{
    kl_dynamical, kl_factorized, kl_factorized_vs, DynamicalQ, FactorizedQ, LatentPrior,
};
