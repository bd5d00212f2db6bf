//! Domain types shared by every stage of the pipeline, plus model validation.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selection::max_factors;

/// An `n × p` observation matrix, rows are observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DMatrix<f64>,
    labels: Option<Vec<usize>>,
    feature_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(y: DMatrix<f64>) -> Result<Self> {
        if y.nrows() < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 observations, got {}", y.nrows())));
        }
        if y.ncols() < 1 {
            return Err(Error::InvalidInput("need at least one feature".into()));
        }
        if let Some(pos) = y.iter().position(|v| !v.is_finite()) {
            let (col, row) = (pos / y.nrows(), pos % y.nrows());
            return Err(Error::InvalidInput(format!(
                "non-finite value at row {}, column {}",
                row + 1,
                col + 1
            )));
        }
        Ok(Self { y, labels: None, feature_names: None })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let p = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != p) {
            return Err(Error::InvalidInput(format!("row {} has {} values, expected {p}", bad + 1, rows[bad].len())));
        }
        Self::new(DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]))
    }

    /// Attaches ground-truth labels; they must lie in `1..=n`.
    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.n() {
            return Err(Error::InvalidInput(format!("{} labels for {} observations", labels.len(), self.n())));
        }
        if labels.iter().any(|&l| l == 0 || l > self.n()) {
            return Err(Error::InvalidInput("labels must be positive integers no larger than n".into()));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.p() {
            return Err(Error::InvalidInput(format!("{} feature names for {} columns", names.len(), self.p())));
        }
        self.feature_names = Some(names);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn p(&self) -> usize {
        self.y.ncols()
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn feature_names(&self) -> Option<&[String]> {
        self.feature_names.as_deref()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.y.row_mean().transpose()
    }

    /// Per-column sample variances (denominator `n − 1`).
    pub fn variances(&self) -> DVector<f64> {
        let mean = self.mean();
        let denom = (self.n() - 1) as f64;
        DVector::from_fn(self.p(), |j, _| {
            self.y.column(j).iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / denom
        })
    }
}

/// Parameters of one t-factor analyzer: `t_p(μ, ΛΛᵀ + Ψ, ν)` with mixing weight `ω`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ComponentWire", try_from = "ComponentWire")]
pub struct ComponentParams {
    pub weight: f64,
    pub mean: DVector<f64>,
    /// `p × q` loading matrix.
    pub loadings: DMatrix<f64>,
    /// Diagonal of `Ψ`.
    pub uniquenesses: DVector<f64>,
    pub dof: f64,
}

impl ComponentParams {
    pub fn p(&self) -> usize {
        self.mean.len()
    }

    pub fn n_factors(&self) -> usize {
        self.loadings.ncols()
    }

    /// `ΛᵀΨ⁻¹Λ`, diagonal for identified loadings.
    pub fn loading_gram(&self) -> DMatrix<f64> {
        let mut scaled = self.loadings.clone();
        for (j, mut row) in scaled.row_iter_mut().enumerate() {
            row /= self.uniquenesses[j];
        }
        self.loadings.transpose() * scaled
    }

    /// Dense `ΛΛᵀ + Ψ`; only for reporting and tests.
    pub fn dense_scale_matrix(&self) -> DMatrix<f64> {
        let mut sigma = &self.loadings * self.loadings.transpose();
        for j in 0..self.p() {
            sigma[(j, j)] += self.uniquenesses[j];
        }
        sigma
    }
}

#[derive(Serialize, Deserialize)]
struct ComponentWire {
    weight: f64,
    mean: Vec<f64>,
    /// Row-major `p × q`.
    loadings: Vec<f64>,
    uniquenesses: Vec<f64>,
    dof: f64,
    n_factors: usize,
}

impl From<ComponentParams> for ComponentWire {
    fn from(c: ComponentParams) -> Self {
        let n_factors = c.n_factors();
        let loadings = c.loadings.transpose().as_slice().to_vec();
        Self {
            weight: c.weight,
            mean: c.mean.as_slice().to_vec(),
            loadings,
            uniquenesses: c.uniquenesses.as_slice().to_vec(),
            dof: c.dof,
            n_factors,
        }
    }
}

impl TryFrom<ComponentWire> for ComponentParams {
    type Error = String;

    fn try_from(w: ComponentWire) -> std::result::Result<Self, String> {
        let p = w.mean.len();
        if w.uniquenesses.len() != p {
            return Err(format!("{} uniquenesses for p = {p}", w.uniquenesses.len()));
        }
        if w.loadings.len() != p * w.n_factors {
            return Err(format!(
                "{} loadings for p = {p} and n_factors = {}",
                w.loadings.len(),
                w.n_factors
            ));
        }
        Ok(Self {
            weight: w.weight,
            mean: DVector::from_vec(w.mean),
            loadings: DMatrix::from_row_slice(p, w.n_factors, &w.loadings),
            uniquenesses: DVector::from_vec(w.uniquenesses),
            dof: w.dof,
        })
    }
}

/// A fitted (or initial) mixture of t-factor analyzers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureModel {
    pub p: usize,
    /// Observed-data log-likelihood at these parameters.
    #[serde(with = "nullable_f64")]
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub components: Vec<ComponentParams>,
    /// Log-likelihood after each ECM cycle, starting with the initial value.
    #[serde(default)]
    pub trace: Vec<f64>,
}

impl MixtureModel {
    /// Wraps components that share a dimension; the likelihood fields start unset.
    pub fn new(components: Vec<ComponentParams>) -> Result<Self> {
        let p = components
            .first()
            .map(ComponentParams::p)
            .ok_or_else(|| Error::InvalidInput("a mixture needs at least one component".into()))?;
        for (k, c) in components.iter().enumerate() {
            if c.p() != p || c.uniquenesses.len() != p || c.loadings.nrows() != p {
                return Err(Error::InvalidInput(format!("component {k} does not have dimension {p}")));
            }
        }
        Ok(Self { p, loglik: f64::NAN, converged: false, iterations: 0, components, trace: Vec::new() })
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn q_vec(&self) -> Vec<usize> {
        self.components.iter().map(ComponentParams::n_factors).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    /// Largest drop between consecutive trace entries, relative to `|loglik|`.
    /// Zero or negative means the trace never decreased.
    pub fn worst_trace_drop(&self) -> f64 {
        self.trace
            .windows(2)
            .map(|w| (w[0] - w[1]) / w[1].abs().max(1.0))
            .fold(f64::NEG_INFINITY, f64::max)
            .max(0.0)
    }
}

mod nullable_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// Posterior summaries from the E-step, both `n × K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    /// `γ_ik`: posterior probability that observation `i` belongs to component `k`.
    pub gamma: DMatrix<f64>,
    /// `η_ik`: posterior mean of the latent scale `u_i` given membership in `k`.
    pub eta: DMatrix<f64>,
}

/// Estimation settings. Every field has a default, so a partial JSON object is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Relative log-likelihood tolerance for the ECM stopping rule.
    pub tol: f64,
    pub max_iter: usize,
    /// Random starts evaluated by emEM in addition to the k-means start.
    pub n_short_starts: usize,
    /// ECM cycles per short emEM run.
    pub short_iters: usize,
    /// Short runs continued to convergence.
    pub n_retained: usize,
    pub seed: u64,
    /// Lower bound on uniquenesses; `None` derives `1e-6 ×` the largest sample variance.
    pub psi_floor: Option<f64>,
    pub dof_bounds: (f64, f64),
    /// Lanczos residual tolerance relative to `max(θ₁, 1)`.
    pub eig_tol: f64,
    /// Inner optimizer tolerance on the projected log-scale gradient, per unit of component mass.
    pub inner_opt_tol: f64,
    pub inner_max_iter: usize,
    pub lbfgs_memory: usize,
    /// Degrees of freedom assigned to every start.
    pub nu_init: f64,
    /// Skip the degrees-of-freedom update.
    pub freeze_dof: bool,
    /// Re-seed collapsing components instead of aborting the fit.
    pub rescue_components: bool,
    pub max_rescues: usize,
    /// Varied-q selection switches to greedy search above this many cells per K.
    pub max_cells: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 500,
            n_short_starts: 20,
            short_iters: 5,
            n_retained: 3,
            seed: 0,
            psi_floor: None,
            dof_bounds: (0.5, 200.0),
            eig_tol: 1e-10,
            inner_opt_tol: 1e-7,
            inner_max_iter: 200,
            lbfgs_memory: 10,
            nu_init: 30.0,
            freeze_dof: false,
            rescue_components: true,
            max_rescues: 3,
            max_cells: 200,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if !(self.tol > 0.0) {
            return bad("tol must be positive");
        }
        if self.max_iter < 1 {
            return bad("max_iter must be at least 1");
        }
        let (lo, hi) = self.dof_bounds;
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return bad("dof_bounds must satisfy 0 < min < max < ∞");
        }
        if !(self.nu_init >= lo && self.nu_init <= hi) {
            return bad("nu_init must lie within dof_bounds");
        }
        if matches!(self.psi_floor, Some(f) if !(f > 0.0)) {
            return bad("psi_floor must be positive");
        }
        if !(self.eig_tol > 0.0 && self.inner_opt_tol > 0.0) {
            return bad("eig_tol and inner_opt_tol must be positive");
        }
        if self.lbfgs_memory == 0 || self.inner_max_iter == 0 {
            return bad("lbfgs_memory and inner_max_iter must be at least 1");
        }
        if self.n_retained == 0 {
            return bad("n_retained must be at least 1");
        }
        Ok(())
    }

    /// The uniqueness floor `ψ_min` used on `data`.
    pub fn psi_floor_for(&self, data: &Dataset) -> f64 {
        self.psi_floor.unwrap_or_else(|| {
            let max_var = data.variances().max();
            if max_var > 0.0 {
                1e-6 * max_var
            } else {
                1e-12
            }
        })
    }
}

/// What a [`Violation`] is about.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    Dimension,
    NonFinite,
    WeightRange,
    WeightSum,
    Uniqueness,
    Dof,
    FactorBound,
    Identifiability,
    TraceDecrease,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub component: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.component {
            Some(k) => write!(f, "component {k}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Thresholds used by [`validate_model_with`].
#[derive(Debug, Clone, Copy)]
pub struct ValidationLimits {
    /// Uniquenesses must be at least this (and strictly positive).
    pub psi_min: f64,
    pub dof_bounds: (f64, f64),
    pub weight_sum_tol: f64,
    /// Off-diagonal of `ΛᵀΨ⁻¹Λ` relative to the norm of its diagonal.
    pub identifiability_tol: f64,
    /// Per-step trace slack relative to `|loglik|`.
    pub trace_slack: f64,
}

impl Default for ValidationLimits {
    fn default() -> Self {
        let cfg = FitConfig::default();
        Self {
            psi_min: 0.0,
            dof_bounds: cfg.dof_bounds,
            weight_sum_tol: 1e-12,
            identifiability_tol: 1e-8,
            trace_slack: 1e-8,
        }
    }
}

/// Checks every structural invariant of `model` with default limits.
pub fn validate_model(model: &MixtureModel) -> Vec<Violation> {
    validate_model_with(model, &ValidationLimits::default())
}

pub fn validate_model_with(model: &MixtureModel, limits: &ValidationLimits) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |kind, component, message: String| out.push(Violation { kind, component, message });

    if model.components.is_empty() {
        push(ViolationKind::Dimension, None, "mixture has no components".into());
        return out;
    }
    let p = model.p;
    let q_max = max_factors(p);
    let weight_sum: f64 = model.components.iter().map(|c| c.weight).sum();
    if (weight_sum - 1.0).abs() > limits.weight_sum_tol {
        push(ViolationKind::WeightSum, None, format!("weights sum {} ≠ 1", short_num(weight_sum)));
    }

    for (k, c) in model.components.iter().enumerate() {
        if c.mean.len() != p || c.uniquenesses.len() != p || c.loadings.nrows() != p {
            push(ViolationKind::Dimension, Some(k), format!("dimension differs from p = {p}"));
            continue;
        }
        let all_finite = c.weight.is_finite()
            && c.dof.is_finite()
            && c.mean.iter().chain(c.loadings.iter()).chain(c.uniquenesses.iter()).all(|v| v.is_finite());
        if !all_finite {
            push(ViolationKind::NonFinite, Some(k), "non-finite parameter".into());
            continue;
        }
        if !(c.weight > 0.0 && c.weight <= 1.0) {
            push(ViolationKind::WeightRange, Some(k), format!("weight {} outside (0, 1]", c.weight));
        }
        if let Some(j) = c.uniquenesses.iter().position(|&u| !(u > 0.0 && u >= limits.psi_min)) {
            push(
                ViolationKind::Uniqueness,
                Some(k),
                format!("uniqueness {} = {} below floor {}", j, c.uniquenesses[j], limits.psi_min),
            );
        }
        let (lo, hi) = limits.dof_bounds;
        if !(c.dof >= lo && c.dof <= hi) {
            push(ViolationKind::Dof, Some(k), format!("dof {} outside [{lo}, {hi}]", c.dof));
        }
        let q = c.n_factors();
        if q > q_max {
            push(ViolationKind::FactorBound, Some(k), format!("{q} factors exceed the bound {q_max} for p = {p}"));
        }
        if q > 1 && c.uniquenesses.iter().all(|&u| u > 0.0) {
            let gram = c.loading_gram();
            let diag_norm = gram.diagonal().norm();
            let mut off = 0.0f64;
            for a in 0..q {
                for b in 0..q {
                    if a != b {
                        off = off.max(gram[(a, b)].abs());
                    }
                }
            }
            if off > limits.identifiability_tol * diag_norm.max(f64::MIN_POSITIVE) {
                push(
                    ViolationKind::Identifiability,
                    Some(k),
                    format!("ΛᵀΨ⁻¹Λ is not diagonal (largest off-diagonal {off:.3e}, diagonal norm {diag_norm:.3e})"),
                );
            }
        }
    }

    for (step, w) in model.trace.windows(2).enumerate() {
        let slack = limits.trace_slack * w[1].abs().max(w[0].abs());
        if w[1] < w[0] - slack {
            push(
                ViolationKind::TraceDecrease,
                None,
                format!("log-likelihood fell from {} to {} at cycle {}", w[0], w[1], step + 1),
            );
        }
    }
    out
}

fn short_num(v: f64) -> String {
    let s = format!("{v:.9}");
    let s = s.trim_end_matches('0');
    s.trim_end_matches('.').to_string()
}
