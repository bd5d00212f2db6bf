//! Evaluation: adjusted Rand index, component matching, relative distances
//! and BIC correctness rates.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::MixtureModel;
use crate::selection::SelectionTable;

fn pairs(m: f64) -> f64 {
    m * (m - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings of the same observations.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!("label vectors have lengths {} and {}", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let mut table: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, f64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, f64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *rows.entry(x).or_default() += 1.0;
        *cols.entry(y).or_default() += 1.0;
    }
    let index: f64 = table.values().map(|&m| pairs(m)).sum();
    let sum_a: f64 = rows.values().map(|&m| pairs(m)).sum();
    let sum_b: f64 = cols.values().map(|&m| pairs(m)).sum();
    let expected = sum_a * sum_b / pairs(n);
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        // Both partitions trivial (all singletons or a single block).
        return Ok(if rows.len() == cols.len() { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

/// Minimum-cost assignment for a square cost matrix; `result[row] = column`.
pub fn hungarian(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    // Potentials-based O(n³) method with 1-based sentinel column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut min_v = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < min_v[j] {
                        min_v[j] = cur;
                        way[j] = j0;
                    }
                    if min_v[j] < delta {
                        delta = min_v[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_v[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0; n];
    for j in 1..=n {
        if owner[j] > 0 {
            result[owner[j] - 1] = j - 1;
        }
    }
    result
}

/// `perm[k]` is the fitted component matched to true component `k`,
/// minimizing the summed distance between means.
pub fn match_components(truth: &MixtureModel, fitted: &MixtureModel) -> Result<Vec<usize>> {
    if truth.k() != fitted.k() {
        return Err(Error::InvalidInput(format!("truth has K = {} but the fit has K = {}", truth.k(), fitted.k())));
    }
    if truth.p != fitted.p {
        return Err(Error::InvalidInput("truth and fit differ in dimension".into()));
    }
    let k = truth.k();
    let cost = DMatrix::from_fn(k, k, |a, b| (&truth.components[a].mean - &fitted.components[b].mean).norm());
    Ok(hungarian(&cost))
}

/// Relative Frobenius distances per matched component.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelDistances {
    pub d_mu: Vec<f64>,
    pub d_lambda: Vec<f64>,
    pub d_psi: Vec<f64>,
    /// Entries whose true norm was zero, so the distance is absolute: `(component, "mu" | "lambda" | "psi")`.
    pub absolute: Vec<(usize, &'static str)>,
}

/// `‖x̂ − x‖ / ‖x‖` for means, `ΛΛᵀ` and the uniqueness diagonals.
pub fn rel_distances(truth: &MixtureModel, fitted: &MixtureModel, perm: &[usize]) -> Result<RelDistances> {
    if perm.len() != truth.k() || perm.iter().any(|&j| j >= fitted.k()) || truth.p != fitted.p {
        return Err(Error::InvalidInput("permutation does not match the models".into()));
    }
    let mut out = RelDistances { d_mu: vec![], d_lambda: vec![], d_psi: vec![], absolute: vec![] };
    for (k, &j) in perm.iter().enumerate() {
        let (t, f) = (&truth.components[k], &fitted.components[j]);
        let mut rel = |diff: f64, norm: f64, what: &'static str| {
            if norm > 0.0 {
                diff / norm
            } else {
                out.absolute.push((k, what));
                diff
            }
        };
        let mu = rel((&f.mean - &t.mean).norm(), t.mean.norm(), "mu");
        let tl = &t.loadings * t.loadings.transpose();
        let fl = &f.loadings * f.loadings.transpose();
        let lambda = rel((&fl - &tl).norm(), tl.norm(), "lambda");
        let psi = rel((&f.uniquenesses - &t.uniquenesses).norm(), t.uniquenesses.norm(), "psi");
        out.d_mu.push(mu);
        out.d_lambda.push(lambda);
        out.d_psi.push(psi);
    }
    Ok(out)
}

/// Fraction of tables whose best cell has the true `K` and, as a multiset, the true `q`.
pub fn correctness_rate(tables: &[SelectionTable], k: usize, q_vec: &[usize]) -> Result<f64> {
    if tables.is_empty() {
        return Err(Error::InvalidInput("no selection tables".into()));
    }
    let mut truth = q_vec.to_vec();
    truth.sort_unstable();
    let hits = tables
        .iter()
        .filter(|t| {
            let best = t.best();
            let mut q = best.q_vec.clone();
            q.sort_unstable();
            best.k == k && q == truth
        })
        .count();
    Ok(hits as f64 / tables.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ComponentParams;
    use crate::selection::{CellStatus, QMode, SelectionEntry};
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ari_values() {
        assert_eq!(ari(&[0, 0, 1, 1, 2], &[5, 5, 3, 3, 9]).unwrap(), 1.0);
        assert!((ari(&[1, 1, 2, 2], &[1, 2, 1, 2]).unwrap() - -0.5).abs() < 1e-15);
        assert!(ari(&[1, 2], &[1]).is_err());
        assert_eq!(ari(&[0, 0, 0], &[1, 1, 1]).unwrap(), 1.0);
    }

    #[test]
    fn ari_of_independent_labels_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..3)).collect();
        let b: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..3)).collect();
        assert!(ari(&a, &b).unwrap().abs() < 0.02);
    }

    fn model(means: &[f64]) -> MixtureModel {
        let comps = means
            .iter()
            .map(|&m| ComponentParams {
                weight: 1.0 / means.len() as f64,
                mean: DVector::from_vec(vec![m, -m]),
                loadings: DMatrix::from_column_slice(2, 1, &[m, 1.0]),
                uniquenesses: DVector::from_vec(vec![1.0, 1.0]),
                dof: 4.0,
            })
            .collect();
        MixtureModel::new(comps).unwrap()
    }

    #[test]
    fn matching_simple_cases() {
        let t = model(&[0.0, 5.0, 10.0]);
        assert_eq!(match_components(&t, &t).unwrap(), vec![0, 1, 2]);
        let r = model(&[10.0, 5.0, 0.0]);
        assert_eq!(match_components(&t, &r).unwrap(), vec![2, 1, 0]);
        assert!(match_components(&t, &model(&[1.0])).is_err());
    }

    fn brute_force(cost: &DMatrix<f64>) -> f64 {
        fn go(cost: &DMatrix<f64>, row: usize, used: &mut Vec<bool>) -> f64 {
            if row == cost.nrows() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..cost.ncols() {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[(row, j)] + go(cost, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        go(cost, 0, &mut vec![false; cost.ncols()])
    }

    #[test]
    fn matching_agrees_with_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in [3, 5] {
            for _ in 0..50 {
                let cost = DMatrix::from_fn(k, k, |_, _| rng.random_range(0.0..10.0));
                let perm = hungarian(&cost);
                let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
                assert!((total - brute_force(&cost)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn distances() {
        let t = model(&[1.0, 2.0]);
        let d = rel_distances(&t, &t, &[0, 1]).unwrap();
        assert!(d.d_mu.iter().chain(&d.d_lambda).chain(&d.d_psi).all(|&v| v == 0.0));

        let mut doubled = t.clone();
        doubled.components.iter_mut().for_each(|c| c.uniquenesses *= 2.0);
        assert_eq!(rel_distances(&t, &doubled, &[0, 1]).unwrap().d_psi, vec![1.0, 1.0]);

        let zero = model(&[0.0]);
        let d = rel_distances(&zero, &model(&[1.0]), &[0]).unwrap();
        assert!(d.absolute.contains(&(0, "mu")));
    }

    #[test]
    fn loading_distance_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = model(&[1.0]);
        t.components[0].mean = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        t.components[0].uniquenesses = DVector::from_element(4, 0.5);
        t.p = 4;
        t.components[0].loadings = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
        let a: f64 = rng.random_range(0.0..6.0);
        let rot = DMatrix::from_row_slice(2, 2, &[a.cos(), -a.sin(), a.sin(), a.cos()]);
        let mut f = t.clone();
        f.components[0].loadings = &t.components[0].loadings * rot;
        assert!(rel_distances(&t, &f, &[0]).unwrap().d_lambda[0] < 1e-14);
    }

    fn table(k: usize, q: Vec<usize>) -> SelectionTable {
        SelectionTable {
            n: 10,
            p: 5,
            mode: QMode::Varied,
            entries: vec![SelectionEntry {
                k,
                q_vec: q,
                loglik: 0.0,
                k_p: 1,
                bic: 0.0,
                status: CellStatus::Converged,
                seed: 0,
            }],
            best_index: 0,
            truncated_q_max: None,
            greedy_k: vec![],
        }
    }

    #[test]
    fn correctness_counts() {
        let all = vec![table(2, vec![2, 3]); 4];
        assert_eq!(correctness_rate(&all, 2, &[2, 3]).unwrap(), 1.0);
        assert_eq!(correctness_rate(&[table(2, vec![3, 2])], 2, &[2, 3]).unwrap(), 1.0);
        let mixed: Vec<_> = (0..10).map(|i| if i < 7 { table(2, vec![2, 2]) } else { table(3, vec![2, 2, 2]) }).collect();
        assert!((correctness_rate(&mixed, 2, &[2, 2]).unwrap() - 0.7).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn ari_symmetric_and_relabel_invariant(labels in prop::collection::vec((0usize..4, 0usize..4), 2..60)) {
            let a: Vec<usize> = labels.iter().map(|l| l.0).collect();
            let b: Vec<usize> = labels.iter().map(|l| l.1).collect();
            let ab = ari(&a, &b).unwrap();
            prop_assert!((ab - ari(&b, &a).unwrap()).abs() < 1e-12);
            let relabeled: Vec<usize> = a.iter().map(|&x| 10 + 3 * x).collect();
            prop_assert!((ab - ari(&relabeled, &b).unwrap()).abs() < 1e-12);
        }
    }
}
