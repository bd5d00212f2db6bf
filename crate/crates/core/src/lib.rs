//! Robust model-based clustering with mixtures of t-factor analyzers.
//!
//! Each mixture component is a multivariate t distribution whose scale matrix
//! is low-rank plus diagonal, `Σ = ΛΛᵀ + Ψ`. Parameters are estimated by a
//! hybrid ECM scheme: the E-step and the weight/mean updates are the usual
//! t-mixture ones, while `(Λ, Ψ)` are updated per component by maximizing a
//! profile likelihood over `Ψ` alone with a matrix-free partial
//! eigendecomposition and a box-constrained limited-memory quasi-Newton
//! method. Model size `(K, q)` is chosen by BIC.
//!
//! The crate is organised bottom-up:
//!
//! * [`special`] – `ln Γ` and digamma.
//! * [`kernels`] – Woodbury algebra for `ΛΛᵀ + Ψ` and the t log-density.
//! * [`eigen`] – thick-restart Lanczos on the whitened weighted scatter.
//! * [`optim`] – projected L-BFGS with lower bounds.
//! * [`profile`] – profile likelihood over `Ψ` and loading recovery.
//! * [`ecm`] – the ECM driver.
//! * [`init`] – k-means and random starts combined by emEM.
//! * [`selection`] – parameter counts, BIC, and the `(K, q)` grid.
//! * [`simulate`] and [`metrics`] – synthetic data and evaluation.
//! * [`io`] – CSV/JSON persistence and run manifests.

pub mod ecm;
pub mod eigen;
mod error;
pub mod init;
pub mod io;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod profile;
pub mod rng;
pub mod selection;
pub mod simulate;
pub mod special;

pub use ecm::{e_step, fit, observed_loglik, FitResult, FitWarning};
pub use error::{Error, Result};
pub use init::{em_em, kmeans_start, random_start};
pub use model::{
    validate_model, ComponentParams, Dataset, FitConfig, MixtureModel, Responsibilities,
    Violation,
};
pub use selection::{
    bic, count_params, enumerate_q_vectors, max_factors, select, QMode, Selection,
    SelectionTable,
};
