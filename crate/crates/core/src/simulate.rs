//! Synthetic mixtures of t-factor analyzers with a tunable overlap.
//!
//! Means and loadings are standard normal, uniquenesses `Unif(0.2, 0.8)`.
//! A point from component `k` is `μ_k + x / √(s/ν_k)` where
//! `x ~ N(0, Λ_kΛ_kᵀ + Ψ_k)` and `s ~ χ²_{ν_k}`. Overlap is controlled by a
//! global factor on the means and measured by Monte Carlo misclassification
//! of the Gaussian cores.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{ChiSquared, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{log_normal_from_parts, CovarianceFactor};
use crate::model::{ComponentParams, Dataset, MixtureModel};
use crate::rng;
use crate::selection::max_factors;

const CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub n: usize,
    pub p: usize,
    pub k: usize,
    pub q_vec: Vec<usize>,
    pub dof_vec: Vec<f64>,
    pub weights: Vec<f64>,
    /// Generalized overlap the means should be scaled to reach.
    pub target_overlap: Option<f64>,
    /// Factor applied to the standard-normal means.
    pub mean_scale: f64,
    pub seed: u64,
}

impl SimSpec {
    /// Equal weights, unit mean scale, no overlap target.
    pub fn new(n: usize, p: usize, q_vec: Vec<usize>, dof_vec: Vec<f64>, seed: u64) -> Self {
        let k = q_vec.len();
        Self { n, p, k, q_vec, dof_vec, weights: vec![1.0 / k as f64; k], target_overlap: None, mean_scale: 1.0, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.k == 0 || self.p == 0 || self.n == 0 {
            return bad("n, p and K must be positive".into());
        }
        if self.q_vec.len() != self.k || self.dof_vec.len() != self.k || self.weights.len() != self.k {
            return bad(format!("q, dof and weights need {} entries each", self.k));
        }
        let max = max_factors(self.p);
        if let Some(&q) = self.q_vec.iter().find(|&&q| q > max) {
            return Err(Error::TooManyFactors { q, p: self.p, max });
        }
        if self.dof_vec.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return bad("degrees of freedom must be positive and finite".into());
        }
        if self.weights.iter().any(|&w| !(w > 0.0)) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("weights must be positive and sum to 1".into());
        }
        if !(self.mean_scale >= 0.0 && self.mean_scale.is_finite()) {
            return bad("mean_scale must be finite and non-negative".into());
        }
        if matches!(self.target_overlap, Some(w) if !(w > 0.0 && w < 1.0)) {
            return bad("target overlap must lie in (0, 1)".into());
        }
        Ok(())
    }
}

/// Rotates `Λ` so that `ΛᵀΨ⁻¹Λ` is diagonal with decreasing entries.
pub fn canonicalize_loadings(loadings: &DMatrix<f64>, psi: &DVector<f64>) -> DMatrix<f64> {
    if loadings.ncols() == 0 {
        return loadings.clone();
    }
    let mut scaled = loadings.clone();
    for (j, mut row) in scaled.row_iter_mut().enumerate() {
        row /= psi[j];
    }
    let gram = loadings.transpose() * scaled;
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let rot = DMatrix::from_fn(order.len(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    let mut out = loadings * rot;
    // Sign convention: the largest entry of each column is positive.
    for mut col in out.column_iter_mut() {
        let idx = col.iamax();
        if col[idx] < 0.0 {
            col.neg_mut();
        }
    }
    out
}

/// The true parameters implied by `spec`.
pub fn truth_model(spec: &SimSpec) -> Result<MixtureModel> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, &[rng::TAG_SIM_PARAMS]);
    let p = spec.p;
    let components = (0..spec.k)
        .map(|k| {
            let mean = DVector::from_fn(p, |_, _| spec.mean_scale * rng.sample::<f64, _>(StandardNormal));
            let raw = DMatrix::from_fn(p, spec.q_vec[k], |_, _| rng.sample::<f64, _>(StandardNormal));
            let psi = DVector::from_fn(p, |_, _| rng.random_range(0.2..0.8));
            ComponentParams {
                weight: spec.weights[k],
                loadings: canonicalize_loadings(&raw, &psi),
                mean,
                uniquenesses: psi,
                dof: spec.dof_vec[k],
            }
        })
        .collect();
    MixtureModel::new(components)
}

/// Lower Cholesky factors of `ΛΛᵀ + Ψ` per component.
fn core_factors(model: &MixtureModel) -> Result<Vec<DMatrix<f64>>> {
    model
        .components
        .iter()
        .map(|c| {
            c.dense_scale_matrix()
                .cholesky()
                .map(|ch| ch.l())
                .ok_or_else(|| Error::IllConditioned("scale matrix is not positive definite".into()))
        })
        .collect()
}

fn pick_component(u: f64, weights: &[f64]) -> usize {
    let mut acc = 0.0;
    for (k, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    weights.len() - 1
}

/// Draws the data set; rows come in fixed-size chunks, each with its own seeded stream.
pub fn gen_tmix(spec: &SimSpec) -> Result<(Dataset, MixtureModel)> {
    let truth = truth_model(spec)?;
    let chol = core_factors(&truth)?;
    let p = spec.p;
    let chunks = spec.n.div_ceil(CHUNK);
    let weights = truth.weights();
    let parts: Vec<(Vec<f64>, Vec<usize>)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng::stream(spec.seed, &[rng::TAG_SIM_DRAWS, c as u64]);
            let rows = CHUNK.min(spec.n - c * CHUNK);
            let mut values = Vec::with_capacity(rows * p);
            let mut labels = Vec::with_capacity(rows);
            for _ in 0..rows {
                let k = pick_component(rng.random(), &weights);
                let comp = &truth.components[k];
                let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
                let x = &chol[k] * z;
                let s: f64 = rng.sample(ChiSquared::new(comp.dof).expect("positive dof"));
                let scale = (s / comp.dof).sqrt();
                values.extend((0..p).map(|j| comp.mean[j] + x[j] / scale));
                labels.push(k + 1);
            }
            (values, labels)
        })
        .collect();
    let mut values = Vec::with_capacity(spec.n * p);
    let mut labels = Vec::with_capacity(spec.n);
    for (v, l) in parts {
        values.extend(v);
        labels.extend(l);
    }
    let data = Dataset::new(DMatrix::from_row_slice(spec.n, p, &values))?.with_labels(labels)?;
    Ok((data, truth))
}

/// Common random numbers for overlap estimation: component labels and
/// centered Gaussian-core draws, reused for every mean scale.
struct CoreDraws {
    labels: Vec<usize>,
    /// `mc × p`, row `i` drawn from `N(0, Σ_{labels[i]})`.
    centered: DMatrix<f64>,
}

fn core_draws(model: &MixtureModel, mc: usize, seed: u64) -> Result<CoreDraws> {
    let chol = core_factors(model)?;
    let p = model.p;
    let weights = model.weights();
    let chunks = mc.div_ceil(CHUNK);
    let parts: Vec<(Vec<f64>, Vec<usize>)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng::stream(seed, &[rng::TAG_OVERLAP_MC, c as u64]);
            let rows = CHUNK.min(mc - c * CHUNK);
            let mut values = Vec::with_capacity(rows * p);
            let mut labels = Vec::with_capacity(rows);
            for _ in 0..rows {
                let k = pick_component(rng.random(), &weights);
                let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
                values.extend((&chol[k] * z).iter());
                labels.push(k);
            }
            (values, labels)
        })
        .collect();
    let mut values = Vec::with_capacity(mc * p);
    let mut labels = Vec::with_capacity(mc);
    for (v, l) in parts {
        values.extend(v);
        labels.extend(l);
    }
    Ok(CoreDraws { labels, centered: DMatrix::from_row_slice(mc, p, &values) })
}

/// Overlap with the means of `model` multiplied by `scale`.
fn overlap_at(model: &MixtureModel, draws: &CoreDraws, factors: &[CovarianceFactor], scale: f64) -> f64 {
    let k = model.k();
    let p = model.p;
    let mc = draws.labels.len();
    // Points: scale·μ_{label} + centered draw.
    let mut points = draws.centered.clone();
    for (i, &l) in draws.labels.iter().enumerate() {
        for j in 0..p {
            points[(i, j)] += scale * model.components[l].mean[j];
        }
    }
    let scores: Vec<Vec<f64>> = model
        .components
        .par_iter()
        .zip(factors.par_iter())
        .map(|(c, cf)| {
            let mean = &c.mean * scale;
            let log_det = cf.log_det();
            cf.mahalanobis_rows(&points, &mean)
                .into_iter()
                .map(|d| c.weight.ln() + log_normal_from_parts(d, p, log_det))
                .collect()
        })
        .collect();
    let mut confusion = DMatrix::<f64>::zeros(k, k);
    let mut counts = vec![0.0; k];
    for i in 0..mc {
        let mut best = 0;
        for j in 1..k {
            if scores[j][i] > scores[best][i] {
                best = j;
            }
        }
        confusion[(draws.labels[i], best)] += 1.0;
        counts[draws.labels[i]] += 1.0;
    }
    let mut total = 0.0;
    let mut n_pairs = 0.0;
    for a in 0..k {
        for b in (a + 1)..k {
            let ab = if counts[a] > 0.0 { confusion[(a, b)] / counts[a] } else { 0.0 };
            let ba = if counts[b] > 0.0 { confusion[(b, a)] / counts[b] } else { 0.0 };
            total += ab + ba;
            n_pairs += 1.0;
        }
    }
    if n_pairs > 0.0 {
        total / n_pairs
    } else {
        0.0
    }
}

fn factors_of(model: &MixtureModel) -> Result<Vec<CovarianceFactor>> {
    model.components.iter().map(|c| CovarianceFactor::new(c.loadings.clone(), c.uniquenesses.clone())).collect()
}

/// Average pairwise misclassification of the Gaussian cores of `model`
/// (pairwise sum of both confusion rates), from `mc` Monte Carlo draws.
pub fn estimate_overlap(model: &MixtureModel, mc: usize, seed: u64) -> Result<f64> {
    if mc == 0 {
        return Err(Error::InvalidInput("need at least one Monte Carlo draw".into()));
    }
    let draws = core_draws(model, mc, seed)?;
    Ok(overlap_at(model, &draws, &factors_of(model)?, 1.0))
}

/// Rescales the means so the estimated overlap is within 10% of the target.
pub fn calibrate_overlap(spec: &SimSpec, mc: usize) -> Result<SimSpec> {
    let target = spec
        .target_overlap
        .ok_or_else(|| Error::InvalidInput("calibration needs a target overlap".into()))?;
    if spec.k < 2 {
        return Err(Error::InvalidInput("overlap needs at least two components".into()));
    }
    if mc == 0 {
        return Err(Error::InvalidInput("need at least one Monte Carlo draw".into()));
    }
    let unit = truth_model(&SimSpec { mean_scale: 1.0, ..spec.clone() })?;
    let draws = core_draws(&unit, mc, rng::derive_seed(spec.seed, &[rng::TAG_OVERLAP_MC]))?;
    let factors = factors_of(&unit)?;
    let at = |s: f64| overlap_at(&unit, &draws, &factors, s);
    let done = |s: f64| ((at(s) - target) / target).abs() <= 0.1;
    let with_scale = |s: f64| SimSpec { mean_scale: s, ..spec.clone() };

    let max_overlap = at(0.0);
    if max_overlap < target {
        return Err(Error::UnreachableOverlap { target, min: 0.0, max: max_overlap });
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    while at(hi) > target {
        lo = hi;
        hi *= 2.0;
        if hi > 1e8 {
            return Err(Error::UnreachableOverlap { target, min: at(hi), max: max_overlap });
        }
    }
    if done(hi) {
        return Ok(with_scale(hi));
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let w = at(mid);
        if ((w - target) / target).abs() <= 0.1 {
            return Ok(with_scale(mid));
        }
        if w > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi {
            break;
        }
    }
    Err(Error::UnreachableOverlap { target, min: at(hi), max: at(lo) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_model;

    #[test]
    fn truth_is_valid_and_identified() {
        let spec = SimSpec::new(300, 12, vec![2, 3, 4], vec![2.0, 3.0, 3.0], 1);
        let (data, truth) = gen_tmix(&spec).unwrap();
        assert_eq!((data.n(), data.p()), (300, 12));
        assert!(validate_model(&truth).is_empty(), "{:?}", validate_model(&truth));
        assert!(truth.components.iter().all(|c| c.uniquenesses.iter().all(|&u| (0.2..0.8).contains(&u))));
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = SimSpec::new(2500, 5, vec![1, 2], vec![4.0, 6.0], 9);
        let (a, _) = gen_tmix(&spec).unwrap();
        let (b, _) = gen_tmix(&spec).unwrap();
        assert_eq!(a.y(), b.y());
        assert_eq!(a.labels(), b.labels());
    }

    #[test]
    fn gaussian_limit_covariance() {
        let mut spec = SimSpec::new(5000, 6, vec![2], vec![1e6], 3);
        spec.weights = vec![1.0];
        let (data, truth) = gen_tmix(&spec).unwrap();
        let y = data.y();
        let mean = data.mean();
        let mut cov = DMatrix::zeros(6, 6);
        for i in 0..data.n() {
            let d = y.row(i).transpose() - &mean;
            cov += &d * d.transpose();
        }
        cov /= (data.n() - 1) as f64;
        let sigma = truth.components[0].dense_scale_matrix();
        assert!((&cov - &sigma).norm() / sigma.norm() < 0.15);
    }

    #[test]
    fn label_frequencies() {
        let mut spec = SimSpec::new(6000, 4, vec![1, 1, 1], vec![5.0; 3], 4);
        spec.weights = vec![0.2, 0.3, 0.5];
        let (data, _) = gen_tmix(&spec).unwrap();
        for (k, w) in spec.weights.iter().enumerate() {
            let count = data.labels().unwrap().iter().filter(|&&l| l == k + 1).count() as f64;
            let n = 6000.0;
            assert!((count - n * w).abs() <= 3.0 * (n * w * (1.0 - w)).sqrt());
        }
    }

    #[test]
    fn component_means_converge() {
        let mut spec = SimSpec::new(20_000, 4, vec![1], vec![5.0], 5);
        spec.weights = vec![1.0];
        let (data, truth) = gen_tmix(&spec).unwrap();
        let c = &truth.components[0];
        // Var of the t draw is ν/(ν−2) Σ.
        let var = c.dense_scale_matrix().diagonal() * (5.0 / 3.0);
        let mean = data.mean();
        for j in 0..4 {
            let se = (var[j] / 20_000.0).sqrt();
            assert!((mean[j] - c.mean[j]).abs() < 5.0 * se);
        }
    }

    #[test]
    fn overlap_limits() {
        let spec = SimSpec::new(100, 6, vec![1, 1], vec![5.0, 5.0], 6);
        let far = truth_model(&SimSpec { mean_scale: 1e4, ..spec.clone() }).unwrap();
        assert_eq!(estimate_overlap(&far, 20_000, 1).unwrap(), 0.0);

        let mut same = truth_model(&spec).unwrap();
        let first = same.components[0].clone();
        same.components[1] = ComponentParams { weight: 0.5, ..first };
        let w = estimate_overlap(&same, 20_000, 1).unwrap();
        // Ties classify to the first component: one confusion rate is 1, the other 0.
        assert!((w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn calibration_reproduces_target() {
        let mut spec = SimSpec::new(300, 10, vec![2, 2], vec![4.0, 4.0], 7);
        spec.target_overlap = Some(0.01);
        let calibrated = calibrate_overlap(&spec, 100_000).unwrap();
        let model = truth_model(&calibrated).unwrap();
        let fresh = estimate_overlap(&model, 100_000, 12345).unwrap();
        assert!(((fresh - 0.01) / 0.01).abs() < 0.2, "fresh estimate {fresh}");
    }

    #[test]
    fn unreachable_target() {
        let mut spec = SimSpec::new(300, 10, vec![2, 2], vec![4.0, 4.0], 8);
        spec.target_overlap = Some(0.999);
        assert!(matches!(calibrate_overlap(&spec, 5000), Err(Error::UnreachableOverlap { .. })));
    }

    #[test]
    fn invalid_specs() {
        let mut spec = SimSpec::new(10, 9, vec![7], vec![3.0], 0);
        assert!(matches!(spec.validate(), Err(Error::TooManyFactors { max: 5, .. })));
        spec.q_vec = vec![2];
        spec.weights = vec![0.7];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn canonical_loadings_are_identified() {
        let l = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -0.3, 2.0, 0.7, 0.1]);
        let psi = DVector::from_vec(vec![0.5, 0.3, 0.9]);
        let c = canonicalize_loadings(&l, &psi);
        let gram = c.transpose() * DMatrix::from_diagonal(&psi.map(|u| 1.0 / u)) * &c;
        assert!(gram[(0, 1)].abs() < 1e-12 && gram[(0, 0)] >= gram[(1, 1)]);
        assert!((&c * c.transpose() - &l * l.transpose()).amax() < 1e-12);
    }
}
