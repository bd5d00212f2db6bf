//! Limited-memory BFGS with lower bounds, via gradient projection.
//!
//! Variables sitting on their bound with a gradient pushing outward are held
//! fixed for the step; the two-loop recursion runs on the free variables and
//! the trial point is projected back onto the feasible box. Every accepted
//! step strictly decreases the objective.

use std::collections::VecDeque;

use nalgebra::DVector;

use crate::error::Result;

#[derive(Debug, Clone)]
pub struct LbfgsSettings {
    pub memory: usize,
    pub max_iter: usize,
    /// Stop when the infinity norm of the projected gradient falls to this.
    pub grad_tol: f64,
    /// Stop when a step reduces the objective by less than `ftol · max(|f|, 1)`.
    pub ftol: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsSettings {
    fn default() -> Self {
        Self { memory: 10, max_iter: 200, grad_tol: 1e-7, ftol: 1e-15, max_backtracks: 40 }
    }
}

/// Predicted decreases below this multiple of `max(|f|, 1)` are lost to rounding.
const ROUNDING: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Gradient,
    SmallDecrease,
    MaxIterations,
    LineSearchFailed,
    /// The predicted decrease along the search direction fell below the
    /// rounding level of the objective, so no step can be verified.
    Roundoff,
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: DVector<f64>,
    pub f: f64,
    pub grad: DVector<f64>,
    pub projected_grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    /// Which coordinates finished on their lower bound.
    pub at_bound: Vec<bool>,
    /// Objective after every accepted step, starting at the initial point.
    pub history: Vec<f64>,
}

/// Minimizes `objective` subject to `x ≥ lower`.
///
/// `objective` returns the value and gradient. Errors from it abort the
/// search; an unsuccessful line search returns the best point so far.
pub fn minimize_bounded<F>(
    mut objective: F,
    x0: &DVector<f64>,
    lower: &DVector<f64>,
    settings: &LbfgsSettings,
) -> Result<Minimum>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let n = x0.len();
    let mut x = x0.zip_map(lower, f64::max);
    let (mut f, mut g) = objective(&x)?;
    let mut evaluations = 1;
    let mut history = vec![f];
    let mut pairs: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::with_capacity(settings.memory);
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    while iterations < settings.max_iter {
        let active = active_set(&x, &g, lower);
        let pg_norm = projected_grad_norm(&g, &active);
        if pg_norm <= settings.grad_tol {
            termination = Termination::Gradient;
            break;
        }

        let mut direction = two_loop(&g, &active, &pairs);
        let mut slope = g.dot(&direction);
        if !(slope < 0.0) {
            pairs.clear();
            direction = steepest(&g, &active);
            slope = g.dot(&direction);
        }
        let mut step = if pairs.is_empty() { (1.0 / direction.amax()).min(1.0) } else { 1.0 };

        let mut accepted = None;
        let mut unmeasurable = false;
        let rounding = ROUNDING * f.abs().max(1.0);
        for attempt in 0..2 {
            for _ in 0..settings.max_backtracks {
                let trial = (&x + &direction * step).zip_map(lower, f64::max);
                let moved = &trial - &x;
                if moved.amax() == 0.0 {
                    break;
                }
                let decrease = g.dot(&moved).min(0.0);
                if -decrease <= rounding {
                    unmeasurable = true;
                    break;
                }
                let (ft, gt) = objective(&trial)?;
                evaluations += 1;
                if ft.is_finite() && ft < f && ft <= f + 1e-4 * decrease {
                    accepted = Some((trial, ft, gt));
                    break;
                }
                step *= 0.5;
            }
            if accepted.is_some() || attempt == 1 || pairs.is_empty() {
                break;
            }
            // Quasi-Newton direction failed; retry along the projected steepest descent.
            pairs.clear();
            direction = steepest(&g, &active);
            slope = g.dot(&direction);
            if !(slope < 0.0) {
                break;
            }
            step = (1.0 / direction.amax()).min(1.0);
        }

        let Some((x_new, f_new, g_new)) = accepted else {
            termination = if unmeasurable { Termination::Roundoff } else { Termination::LineSearchFailed };
            break;
        };
        iterations += 1;
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-10 * s.norm() * y.norm() {
            if pairs.len() == settings.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        let small = f - f_new <= settings.ftol * f.abs().max(1.0);
        x = x_new;
        f = f_new;
        g = g_new;
        history.push(f);
        if small {
            termination = Termination::SmallDecrease;
            break;
        }
    }

    let active = active_set(&x, &g, lower);
    let projected_grad_norm = projected_grad_norm(&g, &active);
    if termination == Termination::MaxIterations && projected_grad_norm <= settings.grad_tol {
        termination = Termination::Gradient;
    }
    let at_bound = (0..n).map(|j| x[j] <= lower[j]).collect();
    Ok(Minimum { x, f, grad: g, projected_grad_norm, iterations, evaluations, termination, at_bound, history })
}

fn active_set(x: &DVector<f64>, g: &DVector<f64>, lower: &DVector<f64>) -> Vec<bool> {
    (0..x.len()).map(|j| x[j] <= lower[j] && g[j] > 0.0).collect()
}

fn projected_grad_norm(g: &DVector<f64>, active: &[bool]) -> f64 {
    g.iter().zip(active).filter(|(_, &a)| !a).map(|(v, _)| v.abs()).fold(0.0, f64::max)
}

fn steepest(g: &DVector<f64>, active: &[bool]) -> DVector<f64> {
    DVector::from_fn(g.len(), |j, _| if active[j] { 0.0 } else { -g[j] })
}

fn two_loop(g: &DVector<f64>, active: &[bool], pairs: &VecDeque<(DVector<f64>, DVector<f64>, f64)>) -> DVector<f64> {
    let mask = |v: &DVector<f64>| DVector::from_fn(v.len(), |j, _| if active[j] { 0.0 } else { v[j] });
    let mut r = mask(g);
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * s.dot(&r);
        r -= mask(y) * a;
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let yy = y.norm_squared();
        if yy > 0.0 {
            r *= s.dot(y) / yy;
        }
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&r);
        r += mask(s) * (a - b);
    }
    -mask(&r)
}
