//! Model size selection by BIC over a grid of `(K, q)` cells.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ecm::FitResult;
use crate::error::{Error, Result};
use crate::init::em_em_fit;
use crate::model::{Dataset, FitConfig};
use crate::rng;

/// Largest admissible number of factors for dimension `p`: the largest
/// `q < p` with `(p − q)² > p + q`, or 0 when even `q = 1` fails.
pub fn max_factors(p: usize) -> usize {
    (1..p).take_while(|&q| (p - q) * (p - q) > p + q).last().unwrap_or(0)
}

/// Free parameters: `2K − 1 + Kp + Σ (p q_k + p − q_k(q_k − 1)/2)`.
pub fn count_params(k: usize, p: usize, q_vec: &[usize]) -> usize {
    let factor: usize = q_vec.iter().map(|&q| p * q + p - q * q.saturating_sub(1) / 2).sum();
    2 * k - 1 + k * p + factor
}

/// `−2 ln L + k_p ln n`.
pub fn bic(loglik: f64, k_p: usize, n: usize) -> f64 {
    -2.0 * loglik + k_p as f64 * (n as f64).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QMode {
    /// The same `q` for every component.
    Uniform,
    /// Any non-decreasing vector of per-component factor counts.
    Varied,
}

/// Candidate factor vectors for `K` components, each sorted non-decreasing.
pub fn enumerate_q_vectors(k: usize, p: usize, mode: QMode, q_max_override: Option<usize>) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::InvalidInput("K must be at least 1".into()));
    }
    let bound = max_factors(p);
    if bound == 0 {
        return Err(Error::InvalidInput(format!("no factor model is identifiable for p = {p}")));
    }
    let top = q_max_override.map_or(bound, |o| o.min(bound));
    if top == 0 {
        return Err(Error::InvalidInput("q_max must be at least 1".into()));
    }
    Ok(match mode {
        QMode::Uniform => (1..=top).map(|q| vec![q; k]).collect(),
        QMode::Varied => {
            let mut out = Vec::new();
            let mut current = vec![1; k];
            multisets(&mut current, 0, 1, top, &mut out);
            out
        }
    })
}

fn multisets(current: &mut Vec<usize>, pos: usize, from: usize, top: usize, out: &mut Vec<Vec<usize>>) {
    if pos == current.len() {
        out.push(current.clone());
        return;
    }
    for q in from..=top {
        current[pos] = q;
        multisets(current, pos + 1, q, top, out);
    }
}

fn multiset_count(k: usize, m: usize) -> usize {
    // C(m + k − 1, k), saturating.
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (m + i) as u128 / (i + 1) as u128;
        if c > usize::MAX as u128 {
            return usize::MAX;
        }
    }
    c as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CellStatus {
    Converged,
    NotConverged,
    Failed { reason: String },
}

impl fmt::Display for CellStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Converged => f.write_str("converged"),
            Self::NotConverged => f.write_str("not_converged"),
            Self::Failed { reason } => write!(f, "failed: {reason}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionEntry {
    pub k: usize,
    pub q_vec: Vec<usize>,
    /// `NaN` (serialized as null) for failed cells.
    #[serde(with = "nullable")]
    pub loglik: f64,
    pub k_p: usize,
    #[serde(with = "nullable")]
    pub bic: f64,
    pub status: CellStatus,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTable {
    pub n: usize,
    pub p: usize,
    pub mode: QMode,
    pub entries: Vec<SelectionEntry>,
    pub best_index: usize,
    /// The requested `q_max` when it exceeded the identifiability bound and was cut down.
    pub truncated_q_max: Option<usize>,
    /// Values of `K` whose varied-q search fell back to greedy neighbour search.
    pub greedy_k: Vec<usize>,
}

impl SelectionTable {
    pub fn best(&self) -> &SelectionEntry {
        &self.entries[self.best_index]
    }

    /// One row per cell: `K, q_vec (joined by '-'), loglik, k_p, bic, status`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["K", "q_vec", "loglik", "k_p", "bic", "status"])?;
        for e in &self.entries {
            let q: Vec<String> = e.q_vec.iter().map(usize::to_string).collect();
            let num = |v: f64| if v.is_finite() { v.to_string() } else { String::new() };
            w.write_record([
                e.k.to_string(),
                q.join("-"),
                num(e.loglik),
                e.k_p.to_string(),
                num(e.bic),
                e.status.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

mod nullable {
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

/// The filled table and the fit of its best cell.
#[derive(Debug, Clone)]
pub struct Selection {
    pub table: SelectionTable,
    pub best: FitResult,
}

/// Seed of the cell `(K, q_vec)`, independent of every other cell.
pub fn cell_seed(seed: u64, k: usize, q_vec: &[usize]) -> u64 {
    let tags: Vec<u64> = [rng::TAG_CELL, k as u64].into_iter().chain(q_vec.iter().map(|&q| q as u64)).collect();
    rng::derive_seed(seed, &tags)
}

fn fit_cell(data: &Dataset, k: usize, q_vec: &[usize], config: &FitConfig) -> (SelectionEntry, Option<FitResult>) {
    let seed = cell_seed(config.seed, k, q_vec);
    let cfg = FitConfig { seed, ..config.clone() };
    let k_p = count_params(k, data.p(), q_vec);
    match em_em_fit(data, k, q_vec, &cfg) {
        Ok(r) => {
            let status = if r.model.converged { CellStatus::Converged } else { CellStatus::NotConverged };
            let entry = SelectionEntry {
                k,
                q_vec: q_vec.to_vec(),
                loglik: r.model.loglik,
                k_p,
                bic: bic(r.model.loglik, k_p, data.n()),
                status,
                seed,
            };
            (entry, Some(r))
        }
        Err(e) => {
            let entry = SelectionEntry {
                k,
                q_vec: q_vec.to_vec(),
                loglik: f64::NAN,
                k_p,
                bic: f64::NAN,
                status: CellStatus::Failed { reason: e.to_string() },
                seed,
            };
            (entry, None)
        }
    }
}

type Cell = (SelectionEntry, Option<FitResult>);

fn fit_cells(data: &Dataset, cells: &[(usize, Vec<usize>)], config: &FitConfig) -> Vec<Cell> {
    cells.par_iter().map(|(k, q)| fit_cell(data, *k, q, config)).collect()
}

/// Fits every cell of the grid and marks the lowest BIC.
///
/// Failed cells are recorded with their status; only a grid in which every
/// cell failed is an error.
pub fn select(
    data: &Dataset,
    k_values: &[usize],
    mode: QMode,
    q_max: Option<usize>,
    config: &FitConfig,
) -> Result<Selection> {
    config.validate()?;
    if k_values.is_empty() {
        return Err(Error::InvalidInput("the K range is empty".into()));
    }
    let bound = max_factors(data.p());
    let truncated_q_max = q_max.filter(|&q| q > bound);

    let mut cells: Vec<Cell> = Vec::new();
    let mut greedy_k = Vec::new();
    for &k in k_values {
        let top = q_max.map_or(bound, |q| q.min(bound));
        if mode == QMode::Varied && multiset_count(k, top) > config.max_cells {
            greedy_k.push(k);
            cells.extend(greedy_search(data, k, top, config)?);
        } else {
            let grid: Vec<(usize, Vec<usize>)> =
                enumerate_q_vectors(k, data.p(), mode, q_max)?.into_iter().map(|q| (k, q)).collect();
            cells.extend(fit_cells(data, &grid, config));
        }
    }

    let mut best: Option<usize> = None;
    for (i, (e, _)) in cells.iter().enumerate() {
        if e.bic.is_finite() && best.is_none_or(|b| e.bic < cells[b].0.bic) {
            best = Some(i);
        }
    }
    let Some(best_index) = best else {
        return Err(Error::AllCellsFailed(cells.iter().map(|(e, _)| format!("K={} q={:?}: {}", e.k, e.q_vec, e.status)).collect()));
    };
    let mut best_fit = None;
    let mut entries = Vec::with_capacity(cells.len());
    for (i, (e, r)) in cells.into_iter().enumerate() {
        if i == best_index {
            best_fit = r;
        }
        entries.push(e);
    }
    let table = SelectionTable { n: data.n(), p: data.p(), mode, entries, best_index, truncated_q_max, greedy_k };
    Ok(Selection { table, best: best_fit.expect("best cell has a fit") })
}

/// Greedy search for one `K`: the best uniform cell, then repeated moves to
/// the best ±1 neighbour (one entry changed) while the BIC improves.
fn greedy_search(data: &Dataset, k: usize, top: usize, config: &FitConfig) -> Result<Vec<Cell>> {
    let uniform: Vec<(usize, Vec<usize>)> = (1..=top).map(|q| (k, vec![q; k])).collect();
    let mut cells = fit_cells(data, &uniform, config);
    let score = |c: &Cell| if c.0.bic.is_finite() { c.0.bic } else { f64::INFINITY };
    let mut current = match (0..cells.len()).min_by(|&a, &b| score(&cells[a]).total_cmp(&score(&cells[b]))) {
        Some(i) if score(&cells[i]).is_finite() => i,
        _ => return Ok(cells),
    };
    loop {
        let base = cells[current].0.q_vec.clone();
        let mut neighbours: Vec<(usize, Vec<usize>)> = Vec::new();
        for j in 0..k {
            for delta in [-1i64, 1] {
                let q = base[j] as i64 + delta;
                if q < 1 || q > top as i64 {
                    continue;
                }
                let mut v = base.clone();
                v[j] = q as usize;
                v.sort_unstable();
                if !cells.iter().any(|c| c.0.q_vec == v) && !neighbours.iter().any(|n| n.1 == v) {
                    neighbours.push((k, v));
                }
            }
        }
        if neighbours.is_empty() {
            break;
        }
        let start = cells.len();
        cells.extend(fit_cells(data, &neighbours, config));
        let best_new = (start..cells.len()).min_by(|&a, &b| score(&cells[a]).total_cmp(&score(&cells[b])));
        match best_new {
            Some(i) if score(&cells[i]) < score(&cells[current]) => current = i,
            _ => break,
        }
    }
    Ok(cells)
}
