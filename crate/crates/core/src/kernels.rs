//! Low-rank-plus-diagonal covariance algebra and the multivariate t log-density.
//!
//! With `Σ = ΛΛᵀ + Ψ` and the `q × q` core `C = I + ΛᵀΨ⁻¹Λ`, the Woodbury
//! identity gives
//!
//! ```text
//! Σ⁻¹     = Ψ⁻¹ − Ψ⁻¹Λ C⁻¹ ΛᵀΨ⁻¹
//! ln |Σ|  = Σⱼ ln ψⱼ + ln |C|
//! ```
//!
//! so nothing larger than `q × q` is ever factorized.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::special::ln_gamma_ratio;

/// Cached Woodbury factorization of `ΛΛᵀ + Ψ`.
#[derive(Debug, Clone)]
pub struct CovarianceFactor {
    loadings: DMatrix<f64>,
    uniquenesses: DVector<f64>,
    inv_psi: DVector<f64>,
    /// `Ψ⁻¹Λ`.
    scaled_loadings: DMatrix<f64>,
    core: DMatrix<f64>,
    core_chol: Cholesky<f64, Dyn>,
    log_det_core: f64,
    log_det_psi: f64,
}

impl CovarianceFactor {
    pub fn new(loadings: DMatrix<f64>, uniquenesses: DVector<f64>) -> Result<Self> {
        let p = uniquenesses.len();
        if loadings.nrows() != p {
            return Err(Error::InvalidInput(format!(
                "loadings have {} rows but there are {p} uniquenesses",
                loadings.nrows()
            )));
        }
        let q = loadings.ncols();
        if q >= p.max(1) {
            return Err(Error::InvalidInput(format!("need q < p, got q = {q}, p = {p}")));
        }
        if let Some(j) = uniquenesses.iter().position(|&u| !(u > 0.0 && u.is_finite())) {
            return Err(Error::IllConditioned(format!("uniqueness {j} is {}", uniquenesses[j])));
        }
        let inv_psi = uniquenesses.map(|u| 1.0 / u);
        let mut scaled_loadings = loadings.clone();
        for (j, mut row) in scaled_loadings.row_iter_mut().enumerate() {
            row *= inv_psi[j];
        }
        let mut core = loadings.transpose() * &scaled_loadings;
        core = (&core + core.transpose()) * 0.5;
        for i in 0..q {
            core[(i, i)] += 1.0;
        }
        let core_chol = Cholesky::new(core.clone())
            .ok_or_else(|| Error::IllConditioned("I + ΛᵀΨ⁻¹Λ is not positive definite".into()))?;
        let log_det_core = 2.0 * core_chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        if !log_det_core.is_finite() {
            return Err(Error::IllConditioned("core log-determinant is not finite".into()));
        }
        let log_det_psi = uniquenesses.iter().map(|u| u.ln()).sum();
        Ok(Self { loadings, uniquenesses, inv_psi, scaled_loadings, core, core_chol, log_det_core, log_det_psi })
    }

    pub fn p(&self) -> usize {
        self.uniquenesses.len()
    }

    pub fn q(&self) -> usize {
        self.loadings.ncols()
    }

    pub fn loadings(&self) -> &DMatrix<f64> {
        &self.loadings
    }

    pub fn uniquenesses(&self) -> &DVector<f64> {
        &self.uniquenesses
    }

    /// The core `I + ΛᵀΨ⁻¹Λ`.
    pub fn core(&self) -> &DMatrix<f64> {
        &self.core
    }

    pub fn log_det_core(&self) -> f64 {
        self.log_det_core
    }

    /// `Σ⁻¹ v`.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        let base = v.component_mul(&self.inv_psi);
        if self.q() == 0 {
            return base;
        }
        let proj = self.loadings.tr_mul(&base);
        let inner = self.core_chol.solve(&proj);
        base - &self.scaled_loadings * inner
    }

    /// `ln |ΛΛᵀ + Ψ|`.
    pub fn log_det(&self) -> f64 {
        self.log_det_psi + self.log_det_core
    }

    /// `(y − μ)ᵀ Σ⁻¹ (y − μ)`.
    pub fn mahalanobis(&self, y: &DVector<f64>, mean: &DVector<f64>) -> f64 {
        let d = y - mean;
        let diag_part: f64 = d.iter().zip(self.inv_psi.iter()).map(|(di, w)| di * di * w).sum();
        if self.q() == 0 {
            return diag_part;
        }
        let proj = self.scaled_loadings.tr_mul(&d);
        let mut z = proj;
        self.core_chol.l_dirty().solve_lower_triangular_mut(&mut z);
        // Only the lower triangle of the factor is meaningful; `l_dirty` is fine for the solve.
        (diag_part - z.norm_squared()).max(0.0)
    }

    /// Mahalanobis distances of every row of `data` from `mean`, in `O(npq)`.
    pub fn mahalanobis_rows(&self, data: &DMatrix<f64>, mean: &DVector<f64>) -> Vec<f64> {
        let n = data.nrows();
        let mut centered = data.clone();
        for (j, mut col) in centered.column_iter_mut().enumerate() {
            col.add_scalar_mut(-mean[j]);
        }
        let mut out = vec![0.0; n];
        for (j, col) in centered.column_iter().enumerate() {
            let w = self.inv_psi[j];
            for (o, v) in out.iter_mut().zip(col.iter()) {
                *o += v * v * w;
            }
        }
        if self.q() == 0 {
            return out;
        }
        // Rows of B = D Ψ⁻¹Λ; solve L Z = Bᵀ and subtract column norms of Z.
        let b = &centered * &self.scaled_loadings;
        let mut z = b.transpose();
        self.core_chol.l_dirty().solve_lower_triangular_mut(&mut z);
        for (o, col) in out.iter_mut().zip(z.column_iter()) {
            *o = (*o - col.norm_squared()).max(0.0);
        }
        out
    }
}

/// Builds the factor; alias kept for callers that think in terms of the operation.
pub fn build_cov_factor(loadings: DMatrix<f64>, uniquenesses: DVector<f64>) -> Result<CovarianceFactor> {
    CovarianceFactor::new(loadings, uniquenesses)
}

/// `ln f_t(y; μ, Σ, ν)` for the multivariate t density.
pub fn log_t_density(y: &DVector<f64>, mean: &DVector<f64>, cf: &CovarianceFactor, dof: f64) -> f64 {
    log_t_from_parts(cf.mahalanobis(y, mean), cf.p(), cf.log_det(), dof)
}

/// The t log-density from a precomputed Mahalanobis distance and `ln |Σ|`.
pub fn log_t_from_parts(mahalanobis: f64, p: usize, log_det: f64, dof: f64) -> f64 {
    let pf = p as f64;
    let half_total = 0.5 * (dof + pf);
    ln_gamma_ratio(0.5 * dof, 0.5 * pf) - 0.5 * pf * (dof * PI).ln() - 0.5 * log_det
        - half_total * (mahalanobis / dof).ln_1p()
}

/// Gaussian log-density `ln φ(y; μ, Σ)` from a Mahalanobis distance and `ln |Σ|`.
pub fn log_normal_from_parts(mahalanobis: f64, p: usize, log_det: f64) -> f64 {
    -0.5 * (p as f64 * (2.0 * PI).ln() + log_det + mahalanobis)
}
