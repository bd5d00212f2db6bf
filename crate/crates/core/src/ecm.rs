//! The ECM driver.
//!
//! One cycle is: E-step (γ, η from the current parameters), then the
//! conditional maximizations in order: weights and means, the factor
//! parameters `(Ψ, Λ)` of every component via the profile likelihood, and
//! finally the degrees of freedom. Each CM step maximizes the expected
//! complete-data log-likelihood given the freshest parameters, so the
//! observed log-likelihood cannot decrease from one cycle to the next.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::eigen::WeightedScatter;
use crate::error::{Error, Result};
use crate::kernels::{log_t_from_parts, CovarianceFactor};
use crate::model::{ComponentParams, Dataset, FitConfig, MixtureModel, Responsibilities};
use crate::profile::{optimize_psi, recover_lambda, ProfileSettings, ProfileState};
use crate::rng;
use crate::special::digamma_unchecked;

/// Per-step slack, relative to `|loglik|`, below which a decrease is treated as rounding.
pub const ASCENT_SLACK: f64 = 1e-8;

static ASCENT_VIOLATIONS: AtomicUsize = AtomicUsize::new(0);
static FITS_RUN: AtomicUsize = AtomicUsize::new(0);

/// Number of ECM runs in this process whose trace dropped by more than [`ASCENT_SLACK`].
pub fn ascent_violations() -> usize {
    ASCENT_VIOLATIONS.load(Ordering::SeqCst)
}

/// Number of ECM runs (including short emEM bursts) executed in this process.
pub fn fits_run() -> usize {
    FITS_RUN.load(Ordering::SeqCst)
}

/// Non-fatal events recorded during a fit.
#[derive(Debug, Clone, PartialEq)]
pub enum FitWarning {
    /// The component's mass fell below the threshold and it was re-seeded.
    ComponentRescued { component: usize, iteration: usize, mass: f64 },
    /// The inner line search stalled; the best iterate was kept.
    LineSearchFailed { component: usize, iteration: usize },
    /// The inner optimizer hit its iteration cap.
    InnerIterationCap { component: usize, iteration: usize },
    /// The ECM loop stopped at `max_iter` without meeting the tolerance.
    NotConverged { iterations: usize },
    /// Fewer observations than `K (q_max + 1)`.
    SmallSample { n: usize, recommended: usize },
}

impl fmt::Display for FitWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ComponentRescued { component, iteration, mass } => {
                write!(f, "component {component} re-seeded at iteration {iteration} (mass {mass:.3e})")
            }
            Self::LineSearchFailed { component, iteration } => {
                write!(f, "uniqueness line search stalled for component {component} at iteration {iteration}")
            }
            Self::InnerIterationCap { component, iteration } => {
                write!(f, "uniqueness optimizer hit its cap for component {component} at iteration {iteration}")
            }
            Self::NotConverged { iterations } => write!(f, "not converged after {iterations} iterations"),
            Self::SmallSample { n, recommended } => {
                write!(f, "only {n} observations; at least {recommended} recommended")
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: MixtureModel,
    pub responsibilities: Responsibilities,
    /// `argmax_k γ_ik`, ties to the lowest index.
    pub hard_assignment: Vec<usize>,
    pub warnings: Vec<FitWarning>,
}

struct EStep {
    resp: Responsibilities,
    /// `ln Σ_k ω_k f_t(y_i)` per row.
    row_loglik: Vec<f64>,
    loglik: f64,
}

fn factors(model: &MixtureModel) -> Result<Vec<CovarianceFactor>> {
    model
        .components
        .iter()
        .map(|c| CovarianceFactor::new(c.loadings.clone(), c.uniquenesses.clone()))
        .collect()
}

fn e_step_full(data: &Dataset, model: &MixtureModel) -> Result<EStep> {
    if model.p != data.p() {
        return Err(Error::InvalidInput(format!("model has p = {} but data has p = {}", model.p, data.p())));
    }
    let (n, p, k) = (data.n(), data.p(), model.k());
    let cfs = factors(model)?;
    // (log ω_k f_t(y_i), δ_ik) for every component, in component order.
    let per_component: Vec<(Vec<f64>, Vec<f64>)> = model
        .components
        .par_iter()
        .zip(cfs.par_iter())
        .map(|(c, cf)| {
            let maha = cf.mahalanobis_rows(data.y(), &c.mean);
            let log_det = cf.log_det();
            let ln_w = c.weight.ln();
            let dens = maha.iter().map(|&d| ln_w + log_t_from_parts(d, p, log_det, c.dof)).collect();
            (dens, maha)
        })
        .collect();

    let mut gamma = DMatrix::zeros(n, k);
    let mut eta = DMatrix::zeros(n, k);
    let mut row_loglik = vec![0.0; n];
    for i in 0..n {
        let top = per_component.iter().map(|(d, _)| d[i]).fold(f64::NEG_INFINITY, f64::max);
        if !top.is_finite() {
            return Err(Error::IllConditioned(format!("observation {i} has zero density under every component")));
        }
        let mut total = 0.0;
        for (kk, (d, _)) in per_component.iter().enumerate() {
            let e = (d[i] - top).exp();
            gamma[(i, kk)] = e;
            total += e;
        }
        for kk in 0..k {
            gamma[(i, kk)] /= total;
            let c = &model.components[kk];
            eta[(i, kk)] = (c.dof + p as f64) / (c.dof + per_component[kk].1[i]);
        }
        row_loglik[i] = top + total.ln();
    }
    let loglik = row_loglik.iter().sum();
    Ok(EStep { resp: Responsibilities { gamma, eta }, row_loglik, loglik })
}

/// Posterior responsibilities and the observed log-likelihood from a single pass.
pub fn e_step(data: &Dataset, model: &MixtureModel) -> Result<(Responsibilities, f64)> {
    let e = e_step_full(data, model)?;
    Ok((e.resp, e.loglik))
}

/// `Σ_i ln Σ_k ω_k f_t(y_i; μ_k, Λ_kΛ_kᵀ + Ψ_k, ν_k)`.
pub fn observed_loglik(data: &Dataset, model: &MixtureModel) -> Result<f64> {
    Ok(e_step_full(data, model)?.loglik)
}

/// `ω̂_k = Σγ_ik / n` and `μ̂_k = Σγη y / Σγη`.
pub fn cm_step_pi_mu(data: &Dataset, resp: &Responsibilities) -> Result<(Vec<f64>, Vec<DVector<f64>>)> {
    let (n, k) = resp.gamma.shape();
    if n != data.n() || resp.eta.shape() != (n, k) {
        return Err(Error::InvalidInput("responsibilities do not match the data".into()));
    }
    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    for kk in 0..k {
        let mass: f64 = resp.gamma.column(kk).sum();
        if !(mass >= n as f64 * 1e-10) {
            return Err(Error::EmptyComponent { component: kk, mass });
        }
        let w = resp.gamma.column(kk).component_mul(&resp.eta.column(kk));
        let wsum = w.sum();
        means.push(data.y().tr_mul(&w) / wsum);
        weights.push(mass / n as f64);
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok((weights, means))
}

/// Root of the degrees-of-freedom equation for one component.
///
/// The equation contains `ψ((ν + p)/2) − ln((ν + p)/2)`, the posterior mean of
/// `ln u` minus `ln η`. With `posterior_dof = Some(ν_cur)` that term is held at
/// the value of the current iterate, which makes the update the exact
/// conditional maximizer; with `None` it varies with the unknown `ν`.
/// Without a sign change inside `bounds` the end with the smaller residual is returned.
pub fn cm_step_dof(gamma: &[f64], eta: &[f64], p: usize, bounds: (f64, f64), posterior_dof: Option<f64>) -> f64 {
    let n_k: f64 = gamma.iter().sum();
    let c = gamma.iter().zip(eta).map(|(g, e)| g * (e.ln() - e)).sum::<f64>() / n_k;
    let g = |nu: f64| {
        let a = posterior_dof.unwrap_or(nu);
        let half = 0.5 * (a + p as f64);
        -digamma_unchecked(0.5 * nu) + (0.5 * nu).ln() + 1.0 + c + digamma_unchecked(half) - half.ln()
    };
    let (mut lo, mut hi) = bounds;
    let (g_lo, g_hi) = (g(lo), g(hi));
    if g_lo.signum() == g_hi.signum() || g_lo == 0.0 || g_hi == 0.0 {
        return if g_lo.abs() <= g_hi.abs() { lo } else { hi };
    }
    let lo_positive = g_lo > 0.0;
    while hi - lo > 1e-8 {
        let mid = 0.5 * (lo + hi);
        if (g(mid) > 0.0) == lo_positive {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Updates `(Λ, Ψ)` of one component from the scatter about `mean`.
///
/// The scatter uses weights `γ η` normalized by `n_k = Σγ` and the profile is
/// optimized with `n_eff = n_k`, warm-started at `prev_psi`.
pub fn cm_step_factor(
    data: &Dataset,
    gamma: &[f64],
    eta: &[f64],
    mean: &DVector<f64>,
    prev_psi: &DVector<f64>,
    q: usize,
    settings: &ProfileSettings,
) -> Result<(DMatrix<f64>, DVector<f64>, ProfileState)> {
    let n_k: f64 = gamma.iter().sum();
    let scatter = WeightedScatter::with_normalizer(data, mean, gamma, eta, Some(n_k))?;
    let state = optimize_psi(prev_psi, &scatter, q, n_k, settings)?;
    let lambda = recover_lambda(&state.psi, &state.theta, &state.vectors);
    Ok((lambda, state.psi.clone(), state))
}

/// Runs ECM from `initial`, or from the emEM-selected start when `initial` is `None`.
pub fn fit(
    data: &Dataset,
    k: usize,
    q_vec: &[usize],
    config: &FitConfig,
    initial: Option<&MixtureModel>,
) -> Result<FitResult> {
    config.validate()?;
    check_shape(data, k, q_vec)?;
    match initial {
        Some(model) => {
            if model.k() != k || model.q_vec() != q_vec {
                return Err(Error::InvalidInput("initial model does not match K and q".into()));
            }
            run_ecm(data, model.clone(), config, config.max_iter)
        }
        None => crate::init::em_em_fit(data, k, q_vec, config),
    }
}

pub(crate) fn check_shape(data: &Dataset, k: usize, q_vec: &[usize]) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidInput("K must be at least 1".into()));
    }
    if q_vec.len() != k {
        return Err(Error::InvalidInput(format!("{} factor counts given for K = {k}", q_vec.len())));
    }
    if k > data.n() {
        return Err(Error::InvalidInput(format!("K = {k} exceeds n = {}", data.n())));
    }
    let max = crate::selection::max_factors(data.p());
    if let Some(&q) = q_vec.iter().find(|&&q| q > max) {
        return Err(Error::TooManyFactors { q, p: data.p(), max });
    }
    Ok(())
}

/// The ECM loop proper, for at most `max_iter` cycles.
pub(crate) fn run_ecm(data: &Dataset, mut model: MixtureModel, config: &FitConfig, max_iter: usize) -> Result<FitResult> {
    FITS_RUN.fetch_add(1, Ordering::SeqCst);
    let (n, p, k) = (data.n(), data.p(), model.k());
    let psi_floor = config.psi_floor_for(data);
    let mut warnings = Vec::new();
    let q_max = model.q_vec().into_iter().max().unwrap_or(0);
    if n < k * (q_max + 1) {
        warnings.push(FitWarning::SmallSample { n, recommended: k * (q_max + 1) });
    }
    for c in &mut model.components {
        c.uniquenesses.iter_mut().for_each(|u| *u = u.max(psi_floor));
    }

    let mut current = e_step_full(data, &model)?;
    let mut trace = vec![current.loglik];
    let mut rescues = 0;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iter {
        iterations += 1;
        let masses: Vec<f64> = (0..k).map(|kk| current.resp.gamma.column(kk).sum()).collect();
        let weak = (0..k).find(|&kk| masses[kk] < ((model.components[kk].n_factors() + 2) as f64).max(1e-6 * n as f64));
        if let Some(kk) = weak {
            if !config.rescue_components || rescues >= config.max_rescues {
                record_trace(&trace);
                return Err(Error::FitFailed {
                    reason: format!("component {kk} collapsed (mass {:.3e})", masses[kk]),
                    trace,
                });
            }
            rescues += 1;
            rescue(data, &mut model, kk, &current.row_loglik, config, psi_floor);
            warnings.push(FitWarning::ComponentRescued { component: kk, iteration: iterations, mass: masses[kk] });
            // The rescue moves the likelihood arbitrarily; the ascent trace restarts here.
            record_trace(&trace);
            current = e_step_full(data, &model)?;
            trace = vec![current.loglik];
            continue;
        }

        let next = match cm_cycle(data, &model, &current.resp, config, psi_floor, iterations, &mut warnings) {
            Ok(m) => m,
            Err(Error::EmptyComponent { component, mass }) => {
                record_trace(&trace);
                return Err(Error::FitFailed { reason: format!("component {component} is empty (mass {mass:.3e})"), trace });
            }
            Err(e) => return Err(e),
        };
        let e = e_step_full(data, &next)?;
        let previous = current.loglik;
        model = next;
        current = e;
        trace.push(current.loglik);
        if (current.loglik - previous).abs() < config.tol * (1.0 + current.loglik.abs()) {
            converged = true;
            break;
        }
    }
    record_trace(&trace);
    if !converged && max_iter == config.max_iter {
        warnings.push(FitWarning::NotConverged { iterations });
    }

    let order = weight_order(&model);
    model.components = order.iter().map(|&kk| model.components[kk].clone()).collect();
    let permute = |m: &DMatrix<f64>| DMatrix::from_fn(n, k, |i, j| m[(i, order[j])]);
    let resp = Responsibilities { gamma: permute(&current.resp.gamma), eta: permute(&current.resp.eta) };
    model.loglik = current.loglik;
    model.converged = converged;
    model.iterations = iterations;
    model.trace = trace;
    debug_assert_eq!(model.p, p);
    let hard_assignment = hard_assign(&resp.gamma);
    Ok(FitResult { model, responsibilities: resp, hard_assignment, warnings })
}

fn record_trace(trace: &[f64]) {
    let bad = trace.windows(2).any(|w| w[1] < w[0] - ASCENT_SLACK * w[0].abs());
    if bad {
        ASCENT_VIOLATIONS.fetch_add(1, Ordering::SeqCst);
    }
    debug_assert!(!bad, "log-likelihood trace decreased: {trace:?}");
}

fn cm_cycle(
    data: &Dataset,
    model: &MixtureModel,
    resp: &Responsibilities,
    config: &FitConfig,
    psi_floor: f64,
    iteration: usize,
    warnings: &mut Vec<FitWarning>,
) -> Result<MixtureModel> {
    let (weights, means) = cm_step_pi_mu(data, resp)?;
    let k = model.k();
    let columns: Vec<(Vec<f64>, Vec<f64>)> = (0..k)
        .map(|kk| (resp.gamma.column(kk).iter().copied().collect(), resp.eta.column(kk).iter().copied().collect()))
        .collect();
    let factor_updates: Vec<Result<(DMatrix<f64>, DVector<f64>, ProfileState)>> = (0..k)
        .into_par_iter()
        .map(|kk| {
            let mut settings = ProfileSettings::from_config(config, psi_floor);
            settings.eig.seed = rng::derive_seed(config.seed, &[rng::TAG_LANCZOS, kk as u64, iteration as u64]);
            let (g, e) = &columns[kk];
            let c = &model.components[kk];
            cm_step_factor(data, g, e, &means[kk], &c.uniquenesses, c.n_factors(), &settings)
        })
        .collect();

    let mut components = Vec::with_capacity(k);
    for (kk, update) in factor_updates.into_iter().enumerate() {
        let (loadings, uniquenesses, state) = update?;
        if state.line_search_failed {
            warnings.push(FitWarning::LineSearchFailed { component: kk, iteration });
        } else if state.iterations >= config.inner_max_iter {
            warnings.push(FitWarning::InnerIterationCap { component: kk, iteration });
        }
        let old = &model.components[kk];
        let dof = if config.freeze_dof {
            old.dof
        } else {
            cm_step_dof(&columns[kk].0, &columns[kk].1, data.p(), config.dof_bounds, Some(old.dof))
        };
        components.push(ComponentParams { weight: weights[kk], mean: means[kk].clone(), loadings, uniquenesses, dof });
    }
    let mut next = MixtureModel::new(components)?;
    next.loglik = f64::NAN;
    Ok(next)
}

/// Moves component `kk` to the worst-fitting observation not already used as a mean.
fn rescue(data: &Dataset, model: &mut MixtureModel, kk: usize, row_loglik: &[f64], config: &FitConfig, psi_floor: f64) {
    let k = model.k();
    let mut order: Vec<usize> = (0..data.n()).collect();
    order.sort_by(|&a, &b| row_loglik[a].total_cmp(&row_loglik[b]).then(a.cmp(&b)));
    let y = data.y();
    let taken = |i: usize| model.components.iter().any(|c| (0..data.p()).all(|j| c.mean[j] == y[(i, j)]));
    let pick = order.iter().copied().find(|&i| !taken(i)).unwrap_or(order[0]);
    let variances = data.variances().map(|v| v.max(psi_floor));
    let q = model.components[kk].n_factors();
    let c = &mut model.components[kk];
    c.mean = y.row(pick).transpose();
    c.uniquenesses = variances;
    c.loadings = DMatrix::zeros(data.p(), q);
    c.dof = config.nu_init;
    c.weight = 1.0 / k as f64;
    let rest: f64 = model.components.iter().enumerate().filter(|(j, _)| *j != kk).map(|(_, c)| c.weight).sum();
    let scale = if rest > 0.0 { (1.0 - 1.0 / k as f64) / rest } else { 0.0 };
    for (j, c) in model.components.iter_mut().enumerate() {
        if j != kk {
            c.weight *= scale;
        }
    }
}

/// Component indices by decreasing weight; ties keep their order.
fn weight_order(model: &MixtureModel) -> Vec<usize> {
    let mut order: Vec<usize> = (0..model.k()).collect();
    order.sort_by(|&a, &b| model.components[b].weight.total_cmp(&model.components[a].weight));
    order
}

pub(crate) fn hard_assign(gamma: &DMatrix<f64>) -> Vec<usize> {
    gamma
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::log_normal_from_parts;
    use crate::special::ln_gamma_unchecked;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{ChiSquared, StandardNormal};

    fn component(weight: f64, mean: Vec<f64>, loadings: DMatrix<f64>, psi: Vec<f64>, dof: f64) -> ComponentParams {
        ComponentParams { weight, mean: DVector::from_vec(mean), loadings, uniquenesses: DVector::from_vec(psi), dof }
    }

    fn random_model(rng: &mut ChaCha8Rng, k: usize, p: usize, q: usize) -> MixtureModel {
        let comps = (0..k)
            .map(|_| ComponentParams {
                weight: 1.0 / k as f64,
                mean: DVector::from_fn(p, |_, _| 3.0 * rng.sample::<f64, _>(StandardNormal)),
                loadings: DMatrix::from_fn(p, q, |_, _| rng.sample(StandardNormal)),
                uniquenesses: DVector::from_fn(p, |_, _| rng.random_range(0.2..0.8)),
                dof: rng.random_range(2.0..10.0),
            })
            .collect();
        MixtureModel::new(comps).unwrap()
    }

    /// Draws `n` points from `model` via the Gaussian scale-mixture representation.
    fn sample(model: &MixtureModel, n: usize, seed: u64) -> (Dataset, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = model.p;
        let mut labels = Vec::with_capacity(n);
        let mut y = DMatrix::zeros(n, p);
        for i in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut kk = model.k() - 1;
            for (j, c) in model.components.iter().enumerate() {
                acc += c.weight;
                if u < acc {
                    kk = j;
                    break;
                }
            }
            let c = &model.components[kk];
            let f = DVector::from_fn(c.n_factors(), |_, _| rng.sample::<f64, _>(StandardNormal));
            let e = DVector::from_fn(p, |j, _| c.uniquenesses[j].sqrt() * rng.sample::<f64, _>(StandardNormal));
            let x = &c.loadings * f + e;
            let s: f64 = rng.sample(ChiSquared::new(c.dof).unwrap());
            let scale = (s / c.dof).sqrt();
            for j in 0..p {
                y[(i, j)] = c.mean[j] + x[j] / scale;
            }
            labels.push(kk);
        }
        (Dataset::new(y).unwrap(), labels)
    }

    /// Dense multivariate t density, computed without the Woodbury identity.
    fn dense_loglik(data: &Dataset, model: &MixtureModel) -> f64 {
        let p = data.p() as f64;
        let mut total = 0.0;
        for i in 0..data.n() {
            let y = data.y().row(i).transpose();
            let mut terms = Vec::new();
            for c in &model.components {
                let sigma = c.dense_scale_matrix();
                let chol = sigma.clone().cholesky().unwrap();
                let d = &y - &c.mean;
                let maha = d.dot(&chol.solve(&d));
                let log_det = 2.0 * chol.l().diagonal().map(f64::ln).sum();
                let v = c.dof;
                terms.push(
                    c.weight.ln() + ln_gamma_unchecked((v + p) / 2.0)
                        - ln_gamma_unchecked(v / 2.0)
                        - 0.5 * p * (v * std::f64::consts::PI).ln()
                        - 0.5 * log_det
                        - 0.5 * (v + p) * (1.0 + maha / v).ln(),
                );
            }
            let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            total += top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln();
        }
        total
    }

    #[test]
    fn single_component_gets_all_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = random_model(&mut rng, 1, 5, 2);
        let (data, _) = sample(&model, 50, 2);
        let (resp, _) = e_step(&data, &model).unwrap();
        assert!(resp.gamma.iter().all(|&g| g == 1.0));
    }

    #[test]
    fn eta_at_the_mean() {
        let c = component(1.0, vec![0.0; 9], DMatrix::zeros(9, 0), vec![1.0; 9], 3.0);
        let model = MixtureModel::new(vec![c]).unwrap();
        let data = Dataset::new(DMatrix::from_fn(2, 9, |i, _| i as f64)).unwrap();
        let (resp, _) = e_step(&data, &model).unwrap();
        assert!((resp.eta[(0, 0)] - 4.0).abs() < 1e-14);
    }

    #[test]
    fn far_component_gets_negligible_mass() {
        let p = 3;
        let c1 = component(0.5, vec![10.0; 3], DMatrix::zeros(p, 0), vec![1.0; 3], 5.0);
        let c2 = component(0.5, vec![-10.0; 3], DMatrix::zeros(p, 0), vec![1.0; 3], 5.0);
        let model = MixtureModel::new(vec![c1, c2]).unwrap();
        let data = Dataset::new(DMatrix::from_row_slice(2, 3, &[10.0, 10.0, 10.0, 0.0, 0.0, 0.0])).unwrap();
        let (resp, _) = e_step(&data, &model).unwrap();
        assert!(resp.gamma[(0, 0)] >= 1.0 - 1e-6);
    }

    #[test]
    fn cauchy_mode() {
        let c = component(1.0, vec![0.0], DMatrix::zeros(1, 0), vec![1.0], 1.0);
        let model = MixtureModel::new(vec![c]).unwrap();
        let data = Dataset::new(DMatrix::from_column_slice(2, 1, &[0.0, 0.0])).unwrap();
        let ll = observed_loglik(&data, &model).unwrap();
        assert!((ll / 2.0 - -1.144_729_885_849_400_2).abs() < 1e-13);
    }

    #[test]
    fn loglik_matches_dense_oracle_and_e_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let model = random_model(&mut rng, 3, 6, 2);
            let (data, _) = sample(&model, 40, rng.random());
            let ll = observed_loglik(&data, &model).unwrap();
            let dense = dense_loglik(&data, &model);
            assert!((ll - dense).abs() <= 1e-10 * dense.abs());
            assert_eq!(e_step(&data, &model).unwrap().1.to_bits(), ll.to_bits());
        }
    }

    #[test]
    fn gaussian_limit_of_loglik() {
        let c = component(1.0, vec![0.0, 1.0], DMatrix::from_column_slice(2, 1, &[0.5, 0.2]), vec![1.0, 2.0], 1e12);
        let model = MixtureModel::new(vec![c.clone()]).unwrap();
        let data = Dataset::new(DMatrix::from_row_slice(2, 2, &[0.3, -0.4, 1.0, 2.0])).unwrap();
        let ll = observed_loglik(&data, &model).unwrap();
        let cf = CovarianceFactor::new(c.loadings.clone(), c.uniquenesses.clone()).unwrap();
        let normal: f64 = cf
            .mahalanobis_rows(data.y(), &c.mean)
            .iter()
            .map(|&d| log_normal_from_parts(d, 2, cf.log_det()))
            .sum();
        assert!((ll - normal).abs() < 1e-6);
    }

    #[test]
    fn weights_and_means() {
        let data = Dataset::new(DMatrix::from_column_slice(2, 1, &[0.0, 4.0])).unwrap();
        let resp = Responsibilities {
            gamma: DMatrix::from_element(2, 1, 1.0),
            eta: DMatrix::from_column_slice(2, 1, &[1.0, 3.0]),
        };
        let (w, m) = cm_step_pi_mu(&data, &resp).unwrap();
        assert_eq!(w, vec![1.0]);
        assert!((m[0][0] - 3.0).abs() < 1e-15);

        let data = Dataset::new(DMatrix::from_fn(4, 2, |i, j| (i * 3 + j) as f64)).unwrap();
        let gamma = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        let resp = Responsibilities { gamma, eta: DMatrix::from_element(4, 2, 1.0) };
        let (w, _) = cm_step_pi_mu(&data, &resp).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);

        let resp = Responsibilities { gamma: DMatrix::from_element(4, 1, 1.0), eta: DMatrix::from_element(4, 1, 1.0) };
        let (_, m) = cm_step_pi_mu(&data, &resp).unwrap();
        assert!((&m[0] - data.mean()).amax() < 1e-14);
    }

    #[test]
    fn empty_component_is_signalled() {
        let data = Dataset::new(DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0])).unwrap();
        let gamma = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let resp = Responsibilities { gamma, eta: DMatrix::from_element(3, 2, 1.0) };
        assert!(matches!(cm_step_pi_mu(&data, &resp), Err(Error::EmptyComponent { component: 1, .. })));
    }

    fn dof_residual(gamma: &[f64], eta: &[f64], p: usize, nu: f64) -> f64 {
        let n_k: f64 = gamma.iter().sum();
        let c = gamma.iter().zip(eta).map(|(g, e)| g * (e.ln() - e)).sum::<f64>() / n_k;
        let half = 0.5 * (nu + p as f64);
        -digamma_unchecked(0.5 * nu) + (0.5 * nu).ln() + 1.0 + c + digamma_unchecked(half) - half.ln()
    }

    #[test]
    fn dof_clamps_when_eta_is_constant() {
        let g = vec![1.0; 10];
        let e = vec![1.0; 10];
        assert!(dof_residual(&g, &e, 2, 100.0) > 0.0);
        assert_eq!(cm_step_dof(&g, &e, 2, (0.5, 200.0), None), 200.0);
    }

    /// η from the E-step of a single t component with the true parameters.
    fn eta_from_t(nu: f64, p: usize, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chi = ChiSquared::new(nu).unwrap();
        (0..n)
            .map(|_| {
                let s: f64 = rng.sample(chi);
                let z: f64 = (0..p).map(|_| rng.sample::<f64, _>(StandardNormal).powi(2)).sum();
                let delta = z / (s / nu);
                (nu + p as f64) / (nu + delta)
            })
            .collect()
    }

    #[test]
    fn dof_root_matches_grid_scan() {
        let mut roots = Vec::new();
        for seed in 0..9 {
            let eta = eta_from_t(5.0, 4, 5000, seed);
            let gamma = vec![1.0; eta.len()];
            let nu = cm_step_dof(&gamma, &eta, 4, (0.5, 200.0), None);
            assert!(dof_residual(&gamma, &eta, 4, nu).abs() < 1e-7);
            // Sign change on a fine grid.
            let grid: Vec<f64> = (0..=199_500).map(|i| 0.5 + i as f64 * 1e-3).collect();
            let scan = grid
                .windows(2)
                .find(|w| dof_residual(&gamma, &eta, 4, w[0]).signum() != dof_residual(&gamma, &eta, 4, w[1]).signum())
                .map(|w| 0.5 * (w[0] + w[1]))
                .unwrap();
            assert!((scan - nu).abs() <= 1e-3, "{scan} vs {nu}");
            roots.push(nu);
        }
        roots.sort_by(f64::total_cmp);
        assert!(roots[4] > 3.5 && roots[4] < 7.0, "median {}", roots[4]);
    }

    #[test]
    fn factor_step_invariant_to_weight_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = random_model(&mut rng, 1, 8, 2);
        let (data, _) = sample(&model, 200, 4);
        let gamma: Vec<f64> = (0..200).map(|i| 0.2 + 0.8 * ((i as f64) * 0.37).sin().abs()).collect();
        let eta: Vec<f64> = (0..200).map(|i| 0.5 + ((i as f64) * 0.11).cos().abs()).collect();
        let scaled: Vec<f64> = gamma.iter().map(|g| 7.0 * g).collect();
        let settings = ProfileSettings { psi_floor: 1e-8, ..Default::default() };
        let init = data.variances() * 0.5;
        let (l1, p1, _) = cm_step_factor(&data, &gamma, &eta, &data.mean(), &init, 2, &settings).unwrap();
        let (l2, p2, _) = cm_step_factor(&data, &scaled, &eta, &data.mean(), &init, 2, &settings).unwrap();
        assert!((&p1 - &p2).amax() <= 1e-8 * p1.amax());
        let s1 = &l1 * l1.transpose();
        let s2 = &l2 * l2.transpose();
        assert!((&s1 - &s2).amax() <= 1e-8 * s1.amax());
    }

    #[test]
    fn factor_step_recovers_gaussian_loadings() {
        let mut dists = Vec::new();
        for seed in 0..9 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut model = random_model(&mut rng, 1, 10, 2);
            model.components[0].dof = 1e8;
            let (data, _) = sample(&model, 2000, 200 + seed);
            let ones = vec![1.0; 2000];
            let settings = ProfileSettings { psi_floor: 1e-8, ..Default::default() };
            let (l, _, _) =
                cm_step_factor(&data, &ones, &ones, &data.mean(), &(data.variances() * 0.5), 2, &settings).unwrap();
            let truth = &model.components[0].loadings * model.components[0].loadings.transpose();
            dists.push((&l * l.transpose() - &truth).norm() / truth.norm());
        }
        dists.sort_by(f64::total_cmp);
        assert!(dists[4] < 0.2, "median {}", dists[4]);
    }

    fn two_cluster_model() -> MixtureModel {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut model = random_model(&mut rng, 2, 6, 1);
        model.components[0].mean = DVector::from_element(6, 20.0 / (2.0 * 6f64.sqrt()));
        model.components[1].mean = -model.components[0].mean.clone();
        for c in &mut model.components {
            c.loadings *= 0.3;
            c.dof = 6.0;
        }
        model
    }

    #[test]
    fn separated_clusters_fit_perfectly_with_monotone_trace() {
        let truth = two_cluster_model();
        let (data, labels) = sample(&truth, 200, 12);
        let config = FitConfig { n_short_starts: 4, ..Default::default() };
        let result = fit(&data, 2, &[1, 1], &config, None).unwrap();
        assert!(result.model.converged);
        assert_eq!(crate::metrics::ari(&labels, &result.hard_assignment).unwrap(), 1.0);
        let t = &result.model.trace;
        assert!(t.windows(2).all(|w| w[1] >= w[0] - ASCENT_SLACK * w[0].abs()));
        assert!(crate::model::validate_model(&result.model).is_empty(), "{:?}", crate::model::validate_model(&result.model));
        let w = result.model.weights();
        assert!(w[0] >= w[1]);
    }

    #[test]
    fn single_component_recovers_mean() {
        let mut dists = Vec::new();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(40 + seed);
            let truth = random_model(&mut rng, 1, 6, 2);
            let (data, _) = sample(&truth, 300, 50 + seed);
            let start = crate::init::kmeans_start(&data, 1, &[2], 0, &FitConfig::default()).unwrap();
            let r = fit(&data, 1, &[2], &FitConfig::default(), Some(&start)).unwrap();
            assert!(r.model.converged);
            let mu = &truth.components[0].mean;
            dists.push((&r.model.components[0].mean - mu).norm() / mu.norm());
        }
        dists.sort_by(f64::total_cmp);
        assert!(dists[2] < 0.1, "median {}", dists[2]);
    }

    #[test]
    fn converged_fit_is_a_fixed_point() {
        let truth = two_cluster_model();
        let (data, _) = sample(&truth, 150, 13);
        let config = FitConfig { n_short_starts: 2, tol: 1e-9, ..Default::default() };
        let r = fit(&data, 2, &[1, 1], &config, None).unwrap();
        let again = run_ecm(&data, r.model.clone(), &config, 1).unwrap();
        assert!((again.model.loglik - r.model.loglik).abs() < config.tol * (1.0 + r.model.loglik.abs()) * 10.0);
    }

    #[test]
    fn translation_and_permutation_equivariance() {
        let truth = two_cluster_model();
        let (data, _) = sample(&truth, 150, 14);
        let config = FitConfig::default();
        let start = crate::init::kmeans_start(&data, 2, &[1, 1], 0, &config).unwrap();
        let a = fit(&data, 2, &[1, 1], &config, Some(&start)).unwrap();

        let mut swapped = start.clone();
        swapped.components.swap(0, 1);
        let b = fit(&data, 2, &[1, 1], &config, Some(&swapped)).unwrap();
        for (x, y) in a.model.components.iter().zip(&b.model.components) {
            assert!((&x.mean - &y.mean).amax() < 1e-6);
        }

        let shift = DVector::from_fn(6, |j, _| 3.0 - j as f64);
        let moved = Dataset::new(DMatrix::from_fn(150, 6, |i, j| data.y()[(i, j)] + shift[j])).unwrap();
        let mut start_moved = start.clone();
        for c in &mut start_moved.components {
            c.mean += &shift;
        }
        let c = fit(&moved, 2, &[1, 1], &config, Some(&start_moved)).unwrap();
        for (x, y) in a.model.components.iter().zip(&c.model.components) {
            assert!((&(&x.mean + &shift) - &y.mean).amax() < 1e-6);
            assert!((&x.uniquenesses - &y.uniquenesses).amax() < 1e-6);
            assert!((x.dof - y.dof).abs() < 1e-6 * x.dof);
            assert!((x.weight - y.weight).abs() < 1e-6);
        }
        assert!((&a.responsibilities.gamma - &c.responsibilities.gamma).amax() < 1e-6);
    }

    #[test]
    fn collapsing_component_is_rescued_or_reported() {
        let truth = two_cluster_model();
        let (data, _) = sample(&truth, 100, 15);
        let mut start = crate::init::kmeans_start(&data, 2, &[1, 1], 0, &FitConfig::default()).unwrap();
        // Both components far from every observation except a corner.
        start.components[1].mean = DVector::from_element(6, 1e3);
        start.components[1].uniquenesses = DVector::from_element(6, 1e-2);
        let r = fit(&data, 2, &[1, 1], &FitConfig::default(), Some(&start)).unwrap();
        assert!(r.warnings.iter().any(|w| matches!(w, FitWarning::ComponentRescued { .. })));

        let strict = FitConfig { rescue_components: false, ..Default::default() };
        assert!(matches!(fit(&data, 2, &[1, 1], &strict, Some(&start)), Err(Error::FitFailed { .. })));
    }

    #[test]
    fn hard_assignment_ties_go_low() {
        let g = DMatrix::from_row_slice(2, 3, &[0.4, 0.4, 0.2, 0.1, 0.45, 0.45]);
        assert_eq!(hard_assign(&g), vec![0, 1]);
    }
}
