//! Starting values: a k-means start, random starts, and the emEM strategy
//! that runs them all briefly and continues only the most promising.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::ecm::{check_shape, run_ecm, FitResult};
use crate::eigen::{top_eigenpairs, LanczosOptions, WeightedScatter};
use crate::error::{Error, Result};
use crate::model::{ComponentParams, Dataset, FitConfig, MixtureModel};
use crate::profile::recover_lambda;
use crate::rng;

const LLOYD_ITERS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartOrigin {
    Random,
    KMeans,
}

/// A start after its short ECM burst.
#[derive(Debug, Clone)]
pub struct StartCandidate {
    pub model: MixtureModel,
    pub short_loglik: f64,
    pub origin: StartOrigin,
}

fn sq_dist(data: &DMatrix<f64>, i: usize, center: &DVector<f64>) -> f64 {
    data.row(i).iter().zip(center.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Hard k-means labels: k-means++ seeding, then Lloyd iterations.
pub fn kmeans_labels(data: &Dataset, k: usize, seed: u64) -> Vec<usize> {
    let y = data.y();
    let n = data.n();
    let mut rng = rng::stream(seed, &[rng::TAG_KMEANS]);
    let mut centers: Vec<DVector<f64>> = vec![y.row(rng.random_range(0..n)).transpose()];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(y, i, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            nearest.iter().position(|&d| {
                acc += d;
                acc > target
            })
            .unwrap_or(n - 1)
        } else {
            rng.random_range(0..n)
        };
        let c = y.row(pick).transpose();
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(y, i, &c));
        }
        centers.push(c);
    }

    let assign = |centers: &[DVector<f64>]| -> Vec<usize> {
        (0..n)
            .map(|i| {
                let mut best = (0, f64::INFINITY);
                for (j, c) in centers.iter().enumerate() {
                    let d = sq_dist(y, i, c);
                    if d < best.1 {
                        best = (j, d);
                    }
                }
                best.0
            })
            .collect()
    };
    let mut labels = assign(&centers);
    let mut reseeded = vec![false; k];
    for _ in 0..LLOYD_ITERS {
        let mut sums = vec![DVector::zeros(data.p()); k];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            sums[l] += y.row(i).transpose();
            counts[l] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = &sums[j] / counts[j] as f64;
            } else if !reseeded[j] {
                // Move an empty center once, onto the point worst served by its own center.
                reseeded[j] = true;
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(y, a, &centers[labels[a]]).total_cmp(&sq_dist(y, b, &centers[labels[b]])).then(b.cmp(&a))
                    })
                    .unwrap_or(0);
                centers[j] = y.row(far).transpose();
            }
        }
        let next = assign(&centers);
        if next == labels {
            break;
        }
        labels = next;
    }
    labels
}

/// Start built from k-means clusters.
///
/// Per cluster: mean, variances floored at `ψ_min` as uniquenesses, loadings
/// from the profile relation on the cluster scatter, `ν = nu_init`, and the
/// cluster proportion as weight. A cluster with fewer than two points
/// falls back to the global variances; the ECM rescue then re-seeds it.
pub fn kmeans_start(data: &Dataset, k: usize, q_vec: &[usize], seed: u64, config: &FitConfig) -> Result<MixtureModel> {
    check_shape(data, k, q_vec)?;
    let labels = kmeans_labels(data, k, seed);
    let floor = config.psi_floor_for(data);
    let (n, p) = (data.n(), data.p());
    let global_var = data.variances().map(|v| v.max(floor));
    let ones = vec![1.0; n];
    let mut components = Vec::with_capacity(k);
    let counts: Vec<usize> = (0..k).map(|j| labels.iter().filter(|&&l| l == j).count()).collect();
    let total: f64 = counts.iter().map(|&c| c.max(1) as f64).sum();
    for j in 0..k {
        let q = q_vec[j];
        let member: Vec<f64> = labels.iter().map(|&l| if l == j { 1.0 } else { 0.0 }).collect();
        let (mean, psi, loadings) = if counts[j] >= 2 {
            let mean = data.y().tr_mul(&DVector::from_vec(member.clone())) / counts[j] as f64;
            let scatter = WeightedScatter::new(data, &mean, &member, &ones)?;
            let psi = scatter.diagonal().map(|v| v.max(floor));
            let loadings = initial_loadings(&scatter, &psi, q, seed)?;
            (mean, psi, loadings)
        } else {
            let i = labels.iter().position(|&l| l == j).unwrap_or(0);
            (data.y().row(i).transpose(), global_var.clone(), DMatrix::zeros(p, q))
        };
        components.push(ComponentParams {
            weight: counts[j].max(1) as f64 / total,
            mean,
            loadings,
            uniquenesses: psi,
            dof: config.nu_init,
        });
    }
    MixtureModel::new(components)
}

fn initial_loadings(scatter: &WeightedScatter, psi: &DVector<f64>, q: usize, seed: u64) -> Result<DMatrix<f64>> {
    if q == 0 {
        return Ok(DMatrix::zeros(psi.len(), 0));
    }
    let opts = LanczosOptions { seed, ..Default::default() };
    let pairs = top_eigenpairs(&scatter.operator(psi), q, &opts)?;
    Ok(recover_lambda(psi, &pairs.values, &pairs.vectors))
}

/// Start with `K` distinct observations as means, global variances as
/// uniquenesses, small random loadings, equal weights and `ν = nu_init`.
pub fn random_start(data: &Dataset, k: usize, q_vec: &[usize], seed: u64, config: &FitConfig) -> Result<MixtureModel> {
    check_shape(data, k, q_vec)?;
    let mut rng = rng::stream(seed, &[rng::TAG_RANDOM_START]);
    let floor = config.psi_floor_for(data);
    let psi = data.variances().map(|v| v.max(floor));
    let p = data.p();
    let picks = sample(&mut rng, data.n(), k);
    let components = picks
        .iter()
        .zip(q_vec)
        .map(|(i, &q)| {
            // Λ = 0.1 Ψ^{1/2} U with orthonormal U, so ΛᵀΨ⁻¹Λ = 0.01 I.
            let raw = DMatrix::from_fn(p, q, |_, _| rng.sample::<f64, _>(StandardNormal));
            let u = raw.qr().q();
            let loadings = DMatrix::from_fn(p, q, |r, c| 0.1 * psi[r].sqrt() * u[(r, c)]);
            ComponentParams {
                weight: 1.0 / k as f64,
                mean: data.y().row(i).transpose(),
                loadings,
                uniquenesses: psi.clone(),
                dof: config.nu_init,
            }
        })
        .collect();
    MixtureModel::new(components)
}

/// The emEM start followed to convergence.
pub fn em_em(data: &Dataset, k: usize, q_vec: &[usize], config: &FitConfig) -> Result<MixtureModel> {
    em_em_fit(data, k, q_vec, config).map(|r| r.model)
}

/// Runs every start for `short_iters` cycles, continues the best `n_retained`
/// to convergence and returns the one with the highest final log-likelihood.
pub fn em_em_fit(data: &Dataset, k: usize, q_vec: &[usize], config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    check_shape(data, k, q_vec)?;
    let kmeans_seed = rng::derive_seed(config.seed, &[rng::TAG_KMEANS]);
    let starts: Vec<(StartOrigin, u64)> = std::iter::once((StartOrigin::KMeans, kmeans_seed))
        .chain((0..config.n_short_starts).map(|s| {
            (StartOrigin::Random, rng::derive_seed(config.seed, &[rng::TAG_RANDOM_START, s as u64]))
        }))
        .collect();

    let short: Vec<Result<StartCandidate>> = starts
        .par_iter()
        .map(|&(origin, seed)| {
            let start = match origin {
                StartOrigin::KMeans => kmeans_start(data, k, q_vec, seed, config)?,
                StartOrigin::Random => random_start(data, k, q_vec, seed, config)?,
            };
            let r = run_ecm(data, start, config, config.short_iters)?;
            Ok(StartCandidate { short_loglik: r.model.loglik, model: r.model, origin })
        })
        .collect();

    let mut failures = Vec::new();
    let mut pool = Vec::new();
    for (s, r) in short.into_iter().enumerate() {
        match r {
            Ok(c) if c.short_loglik.is_finite() => pool.push((s, c)),
            Ok(_) => failures.push(format!("start {s}: non-finite log-likelihood")),
            Err(e) => failures.push(format!("start {s}: {e}")),
        }
    }
    pool.sort_by(|a, b| b.1.short_loglik.total_cmp(&a.1.short_loglik).then(a.0.cmp(&b.0)));
    pool.truncate(config.n_retained);

    let finals: Vec<(usize, Result<FitResult>)> = pool
        .into_par_iter()
        .map(|(s, c)| (s, run_ecm(data, c.model, config, config.max_iter)))
        .collect();
    let mut best: Option<FitResult> = None;
    for (s, r) in finals {
        match r {
            Ok(r) => {
                if best.as_ref().is_none_or(|b| r.model.loglik > b.model.loglik) {
                    best = Some(r);
                }
            }
            Err(e) => failures.push(format!("start {s} (continued): {e}")),
        }
    }
    best.ok_or(Error::AllStartsFailed(failures))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ecm::fit;
    use crate::model::validate_model;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blobs(sizes: &[usize], sep: f64, seed: u64) -> (Dataset, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = 4;
        let n: usize = sizes.iter().sum();
        let mut y = DMatrix::zeros(n, p);
        let mut labels = Vec::new();
        let mut i = 0;
        for (k, &s) in sizes.iter().enumerate() {
            for _ in 0..s {
                for j in 0..p {
                    let center = if j == k % p { sep * (k + 1) as f64 } else { 0.0 };
                    y[(i, j)] = center + rng.sample::<f64, _>(StandardNormal);
                }
                labels.push(k);
                i += 1;
            }
        }
        (Dataset::new(y).unwrap(), labels)
    }

    #[test]
    fn single_cluster_start_is_the_sample_mean() {
        let (data, _) = blobs(&[40], 0.0, 1);
        let m = kmeans_start(&data, 1, &[1], 3, &FitConfig::default()).unwrap();
        assert!((&m.components[0].mean - data.mean()).amax() < 1e-12);
        assert!(validate_model(&m).is_empty());
    }

    #[test]
    fn separated_blobs_give_exact_proportions() {
        let (data, _) = blobs(&[30, 50, 20], 20.0, 2);
        let m = kmeans_start(&data, 3, &[1, 1, 1], 5, &FitConfig::default()).unwrap();
        let mut w = m.weights();
        w.sort_by(f64::total_cmp);
        assert_eq!(w, vec![0.2, 0.3, 0.5]);
        assert!(validate_model(&m).is_empty(), "{:?}", validate_model(&m));
    }

    #[test]
    fn starts_are_deterministic() {
        let (data, _) = blobs(&[30, 30], 5.0, 3);
        let cfg = FitConfig::default();
        let a = kmeans_start(&data, 2, &[1, 1], 9, &cfg).unwrap();
        assert_eq!(a.components, kmeans_start(&data, 2, &[1, 1], 9, &cfg).unwrap().components);
        let b = random_start(&data, 2, &[1, 1], 9, &cfg).unwrap();
        assert_eq!(b.components, random_start(&data, 2, &[1, 1], 9, &cfg).unwrap().components);
    }

    #[test]
    fn random_means_are_distinct_rows() {
        let (data, _) = blobs(&[30, 30], 5.0, 4);
        let cfg = FitConfig::default();
        let a = random_start(&data, 2, &[1, 1], 1, &cfg).unwrap();
        let b = random_start(&data, 2, &[1, 1], 2, &cfg).unwrap();
        for c in &a.components {
            assert!((0..data.n()).any(|i| data.y().row(i).transpose() == c.mean));
        }
        assert_ne!(a.components[0].mean, a.components[1].mean);
        assert_ne!(a.components[0].mean, b.components[0].mean);
        assert!(validate_model(&a).is_empty());
    }

    #[test]
    fn kmeans_only_pool_equals_plain_fit_from_kmeans() {
        let (data, _) = blobs(&[40, 40], 6.0, 5);
        let cfg = FitConfig { n_short_starts: 0, n_retained: 1, short_iters: 0, ..Default::default() };
        let pooled = em_em_fit(&data, 2, &[1, 1], &cfg).unwrap();
        let start = kmeans_start(&data, 2, &[1, 1], rng::derive_seed(cfg.seed, &[rng::TAG_KMEANS]), &cfg).unwrap();
        let plain = fit(&data, 2, &[1, 1], &cfg, Some(&start)).unwrap();
        assert_eq!(pooled.model.loglik.to_bits(), plain.model.loglik.to_bits());
    }

    #[test]
    fn more_starts_never_hurt_the_kmeans_result() {
        let (data, labels) = blobs(&[40, 40], 10.0, 6);
        let only_kmeans = FitConfig { n_short_starts: 0, n_retained: 1, ..Default::default() };
        let full = FitConfig { n_short_starts: 6, n_retained: 7, ..Default::default() };
        let a = em_em_fit(&data, 2, &[1, 1], &only_kmeans).unwrap();
        let b = em_em_fit(&data, 2, &[1, 1], &full).unwrap();
        assert!(b.model.loglik >= a.model.loglik);
        assert_eq!(crate::metrics::ari(&labels, &b.hard_assignment).unwrap(), 1.0);
    }
}
