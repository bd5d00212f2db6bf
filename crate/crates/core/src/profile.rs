//! Profile-likelihood estimation of the factor parameters `(Λ, Ψ)` of one component.
//!
//! For a scatter matrix `S` with mass `n`, maximizing the Gaussian factor
//! log-likelihood over `Λ` (with `q` columns) leaves a function of `Ψ` alone:
//!
//! ```text
//! ℓ_p(Ψ) = −n/2 · [ p ln 2π + Σⱼ ln ψⱼ + Σⱼ S_jj/ψⱼ + Σ_{i ≤ q} h(θᵢ) ]
//! h(θ)   = ln θ − θ + 1   for θ > 1, and 0 otherwise
//! ```
//!
//! where `θ₁ ≥ … ≥ θ_q` are the leading eigenvalues of `Ψ^{-1/2} S Ψ^{-1/2}`.
//! The maximizing loadings are `Λ̂ = Ψ^{1/2} V_q Δ` with `Δᵢᵢ = max(θᵢ − 1, 0)^{1/2}`.
//!
//! The optimizer works in `x = ln ψ`, where the gradient is simply
//! `∂ℓ_p/∂xⱼ = −n/2 · [1 − S_jj/ψⱼ + Σᵢ max(θᵢ − 1, 0) v_{ij}²]`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::eigen::{top_eigenpairs, LanczosOptions, WeightedScatter};
use crate::error::{Error, Result};
use crate::model::FitConfig;
use crate::optim::{minimize_bounded, LbfgsSettings, Termination};

/// Settings for one profile optimization.
#[derive(Debug, Clone)]
pub struct ProfileSettings {
    pub psi_floor: f64,
    pub eig: LanczosOptions,
    pub memory: usize,
    pub max_iter: usize,
    /// Tolerance on the projected log-scale gradient of `ℓ_p`, per unit of `n_eff`.
    pub grad_tol_per_mass: f64,
}

impl ProfileSettings {
    pub fn from_config(config: &FitConfig, psi_floor: f64) -> Self {
        Self {
            psi_floor,
            eig: LanczosOptions { tol: config.eig_tol, seed: config.seed, ..Default::default() },
            memory: config.lbfgs_memory,
            max_iter: config.inner_max_iter,
            grad_tol_per_mass: config.inner_opt_tol,
        }
    }
}

impl Default for ProfileSettings {
    fn default() -> Self {
        Self::from_config(&FitConfig::default(), 1e-8)
    }
}

/// Result of maximizing the profile likelihood.
#[derive(Debug, Clone)]
pub struct ProfileState {
    pub psi: DVector<f64>,
    pub theta: DVector<f64>,
    pub vectors: DMatrix<f64>,
    /// `ℓ_p(ψ)`.
    pub objective: f64,
    /// Infinity norm of the projected gradient of `ℓ_p` with respect to `ln ψ`.
    pub grad_norm: f64,
    pub iterations: usize,
    pub at_floor: Vec<bool>,
    pub line_search_failed: bool,
    pub termination: Termination,
    /// `ℓ_p` after every accepted optimizer step.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Evaluation {
    loglik: f64,
    /// Gradient of the normalized objective `−2 ℓ_p / n` with respect to `ln ψ`.
    norm_grad_log: DVector<f64>,
    theta: DVector<f64>,
    vectors: DMatrix<f64>,
}

fn evaluate(
    psi: &DVector<f64>,
    scatter: &WeightedScatter,
    q: usize,
    n_eff: f64,
    eig: &LanczosOptions,
) -> Result<Evaluation> {
    let p = scatter.dim();
    if psi.len() != p {
        return Err(Error::InvalidInput(format!("ψ has length {} for dimension {p}", psi.len())));
    }
    if let Some(j) = psi.iter().position(|&u| !(u > 0.0 && u.is_finite())) {
        return Err(Error::Domain(format!("ψ[{j}] = {} is not positive", psi[j])));
    }
    let (theta, vectors) = if q == 0 {
        (DVector::zeros(0), DMatrix::zeros(p, 0))
    } else {
        let pairs = top_eigenpairs(&scatter.operator(psi), q, eig)?;
        (pairs.values, pairs.vectors)
    };
    let diag = scatter.diagonal();
    let mut normalized = p as f64 * (2.0 * PI).ln();
    let mut grad = DVector::zeros(p);
    for j in 0..p {
        let ratio = diag[j] / psi[j];
        normalized += psi[j].ln() + ratio;
        grad[j] = 1.0 - ratio;
    }
    for (i, &t) in theta.iter().enumerate() {
        if t > 1.0 {
            normalized += t.ln() - t + 1.0;
            let excess = t - 1.0;
            for j in 0..p {
                grad[j] += excess * vectors[(j, i)].powi(2);
            }
        }
    }
    Ok(Evaluation { loglik: -0.5 * n_eff * normalized, norm_grad_log: grad, theta, vectors })
}

/// `ℓ_p(ψ)` for the scatter's `S` and effective sample size `n_eff`.
pub fn profile_loglik(
    psi: &DVector<f64>,
    scatter: &WeightedScatter,
    q: usize,
    n_eff: f64,
    eig: &LanczosOptions,
) -> Result<f64> {
    Ok(evaluate(psi, scatter, q, n_eff, eig)?.loglik)
}

/// `∂ℓ_p/∂ψⱼ`.
pub fn profile_grad(
    psi: &DVector<f64>,
    scatter: &WeightedScatter,
    q: usize,
    n_eff: f64,
    eig: &LanczosOptions,
) -> Result<DVector<f64>> {
    let e = evaluate(psi, scatter, q, n_eff, eig)?;
    Ok(DVector::from_fn(psi.len(), |j, _| -0.5 * n_eff * e.norm_grad_log[j] / psi[j]))
}

/// Maximizes `ℓ_p` over `ψ ≥ ψ_min`, starting from `init`.
pub fn optimize_psi(
    init: &DVector<f64>,
    scatter: &WeightedScatter,
    q: usize,
    n_eff: f64,
    settings: &ProfileSettings,
) -> Result<ProfileState> {
    if !(n_eff > 0.0) {
        return Err(Error::InvalidInput("n_eff must be positive".into()));
    }
    let floor = settings.psi_floor;
    let x0 = init.map(|u| u.max(floor).ln());
    let lower = DVector::from_element(init.len(), floor.ln());
    let mut seen: Vec<(DVector<f64>, Evaluation)> = Vec::new();
    let mut eig = settings.eig.clone();

    let objective = |x: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let psi = x.map(f64::exp);
        if psi.iter().any(|v| !v.is_finite()) {
            // Overflowing trial step; the line search backs off.
            return Ok((f64::INFINITY, DVector::zeros(x.len())));
        }
        let e = evaluate(&psi, scatter, q, n_eff, &eig)?;
        if q > 0 {
            // Warm start the next solve in the current leading subspace.
            eig.start = Some(e.vectors.column_sum());
        }
        let out = (-2.0 * e.loglik / n_eff, e.norm_grad_log.clone());
        seen.push((x.clone(), e));
        Ok(out)
    };
    let lbfgs = LbfgsSettings {
        memory: settings.memory,
        max_iter: settings.max_iter,
        grad_tol: 2.0 * settings.grad_tol_per_mass,
        ..Default::default()
    };
    let min = minimize_bounded(objective, &x0, &lower, &lbfgs)?;

    let final_eval = match seen.iter().rev().find(|(x, _)| *x == min.x) {
        Some((_, e)) => e.clone(),
        None => evaluate(&min.x.map(f64::exp), scatter, q, n_eff, &settings.eig)?,
    };
    Ok(ProfileState {
        psi: min.x.map(f64::exp),
        theta: final_eval.theta,
        vectors: final_eval.vectors,
        objective: final_eval.loglik,
        grad_norm: 0.5 * n_eff * min.projected_grad_norm,
        iterations: min.iterations,
        at_floor: min.at_bound,
        line_search_failed: min.termination == Termination::LineSearchFailed,
        termination: min.termination,
        history: min.history.iter().map(|f| -0.5 * n_eff * f).collect(),
    })
}

/// `Λ̂ = Ψ^{1/2} V Δ` with `Δᵢᵢ = max(θᵢ − 1, 0)^{1/2}`.
pub fn recover_lambda(psi: &DVector<f64>, theta: &DVector<f64>, vectors: &DMatrix<f64>) -> DMatrix<f64> {
    let (p, q) = vectors.shape();
    DMatrix::from_fn(p, q, |j, i| {
        let delta = (theta[i] - 1.0).max(0.0).sqrt();
        if delta == 0.0 {
            0.0
        } else {
            psi[j].sqrt() * vectors[(j, i)] * delta
        }
    })
}
