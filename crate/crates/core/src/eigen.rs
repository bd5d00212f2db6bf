//! Matrix-free partial eigendecomposition of the whitened weighted scatter
//! `Ψ^{-1/2} Σ̂ Ψ^{-1/2}`.
//!
//! [`WeightedScatter`] stores the weighted, centered rows of one component
//! once per CM cycle; [`ScatterOperator`] applies the whitened scatter for a
//! particular `Ψ` using two thin matrix-vector products. The top eigenpairs
//! come from a thick-restart Lanczos iteration with full reorthogonalization.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::rng;

/// A symmetric linear operator known only through its action on vectors.
pub trait SymmetricOperator {
    fn dim(&self) -> usize;
    fn apply(&self, v: &DVector<f64>) -> DVector<f64>;
}

impl SymmetricOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self * v
    }
}

/// Rows with weight below this fraction of the total are dropped.
const NEGLIGIBLE_WEIGHT: f64 = 1e-12;

/// Weighted scatter `Σᵢ wᵢ (yᵢ − μ)(yᵢ − μ)ᵀ / normalizer`, held as a row factor `R` with `RᵀR` equal to it.
#[derive(Debug, Clone)]
pub struct WeightedScatter {
    factor: DMatrix<f64>,
    diag: DVector<f64>,
    total_weight: f64,
    normalizer: f64,
    n_rows: usize,
}

impl WeightedScatter {
    /// Scatter with weights `γᵢ ηᵢ`, normalized by their sum.
    pub fn new(data: &Dataset, mean: &DVector<f64>, gamma: &[f64], eta: &[f64]) -> Result<Self> {
        Self::with_normalizer(data, mean, gamma, eta, None)
    }

    /// Same rows, divided by `normalizer` instead of `Σ γᵢ ηᵢ`.
    pub fn with_normalizer(
        data: &Dataset,
        mean: &DVector<f64>,
        gamma: &[f64],
        eta: &[f64],
        normalizer: Option<f64>,
    ) -> Result<Self> {
        let (n, p) = (data.n(), data.p());
        if gamma.len() != n || eta.len() != n || mean.len() != p {
            return Err(Error::InvalidInput("scatter inputs have inconsistent lengths".into()));
        }
        let weights: Vec<f64> = gamma.iter().zip(eta).map(|(g, e)| g * e).collect();
        let total_weight: f64 = weights.iter().sum();
        if !(total_weight > 0.0 && total_weight.is_finite()) {
            return Err(Error::EmptyComponent { component: 0, mass: total_weight });
        }
        let normalizer = normalizer.unwrap_or(total_weight);
        if !(normalizer > 0.0) {
            return Err(Error::InvalidInput("scatter normalizer must be positive".into()));
        }
        let keep: Vec<usize> = (0..n).filter(|&i| weights[i] >= NEGLIGIBLE_WEIGHT * total_weight).collect();
        let y = data.y();
        let mut rows = DMatrix::from_fn(keep.len(), p, |r, j| {
            let i = keep[r];
            (weights[i] / normalizer).sqrt() * (y[(i, j)] - mean[j])
        });
        let diag = DVector::from_fn(p, |j, _| rows.column(j).norm_squared());
        let n_rows = rows.nrows();
        if n_rows > 2 * p {
            // RᵀR = rowsᵀ rows with R only p × p; apply cost drops from O(n p) to O(p²).
            rows = rows.qr().r();
        }
        Ok(Self { factor: rows, diag, total_weight, normalizer, n_rows })
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    /// Diagonal of the scatter, `S_jj`.
    pub fn diagonal(&self) -> &DVector<f64> {
        &self.diag
    }

    /// `Σ γᵢ ηᵢ`.
    pub fn total_weight(&self) -> f64 {
        self.total_weight
    }

    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    /// Observations with non-negligible weight.
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    /// The whitened operator `Ψ^{-1/2} S Ψ^{-1/2}`.
    pub fn operator(&self, psi: &DVector<f64>) -> ScatterOperator<'_> {
        ScatterOperator { scatter: self, inv_sqrt_psi: psi.map(|u| 1.0 / u.sqrt()) }
    }

    /// Dense scatter; only for tests and diagnostics.
    pub fn dense(&self) -> DMatrix<f64> {
        self.factor.tr_mul(&self.factor)
    }
}

/// Builds the weighted scatter of one component (weights `γ η`, normalized by their sum).
pub fn make_operator(data: &Dataset, mean: &DVector<f64>, gamma: &[f64], eta: &[f64]) -> Result<WeightedScatter> {
    WeightedScatter::new(data, mean, gamma, eta)
}

#[derive(Debug, Clone)]
pub struct ScatterOperator<'a> {
    scatter: &'a WeightedScatter,
    inv_sqrt_psi: DVector<f64>,
}

impl SymmetricOperator for ScatterOperator<'_> {
    fn dim(&self) -> usize {
        self.inv_sqrt_psi.len()
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let u = v.component_mul(&self.inv_sqrt_psi);
        let t = &self.scatter.factor * u;
        let s = self.scatter.factor.tr_mul(&t);
        s.component_mul(&self.inv_sqrt_psi)
    }
}

/// Top eigenpairs, values descending.
#[derive(Debug, Clone)]
pub struct EigenPairs {
    pub values: DVector<f64>,
    /// Orthonormal columns, one per value.
    pub vectors: DMatrix<f64>,
    pub restarts: usize,
    pub used_dense_fallback: bool,
}

#[derive(Debug, Clone)]
pub struct LanczosOptions {
    /// Residual tolerance relative to `max(θ₁, 1)`.
    pub tol: f64,
    pub max_restarts: usize,
    /// Krylov subspace size; defaults to `max(2q + 2, 20)` capped at the dimension.
    pub subspace_dim: Option<usize>,
    pub seed: u64,
    /// Starting direction; a seeded random vector when absent.
    pub start: Option<DVector<f64>>,
    /// At or below this dimension a dense decomposition backs up non-convergence.
    pub dense_fallback_dim: usize,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_restarts: 300, subspace_dim: None, seed: 0, start: None, dense_fallback_dim: 64 }
    }
}

/// The `q` largest eigenpairs of a symmetric operator.
pub fn top_eigenpairs<A: SymmetricOperator + ?Sized>(op: &A, q: usize, opts: &LanczosOptions) -> Result<EigenPairs> {
    let n = op.dim();
    if q == 0 || q > n {
        return Err(Error::InvalidInput(format!("requested {q} eigenpairs of a {n}-dimensional operator")));
    }
    let m = opts.subspace_dim.unwrap_or((2 * q + 2).max(20)).clamp(q.min(n), n).max((q + 1).min(n));
    let mut rng = rng::stream(opts.seed, &[rng::TAG_LANCZOS]);

    let mut basis = DMatrix::<f64>::zeros(n, m + 1);
    let mut proj = DMatrix::<f64>::zeros(m, m);
    let start = match &opts.start {
        Some(s) if s.len() == n && s.norm() > 0.0 => s.clone(),
        _ => random_unit(n, &mut rng),
    };
    basis.set_column(0, &start.normalize());

    let mut kept = 0;
    let mut scale = f64::MIN_POSITIVE;
    for restart in 0..=opts.max_restarts {
        let mut residual_norm = 0.0;
        for j in kept..m {
            let mut w = op.apply(&basis.column(j).into_owned());
            scale = scale.max(w.norm());
            let mut h = DVector::zeros(j + 1);
            // Classical Gram–Schmidt, twice.
            for _ in 0..2 {
                let v = basis.columns(0, j + 1);
                let c = v.tr_mul(&w);
                w -= &v * &c;
                h += c;
            }
            for i in 0..=j {
                proj[(i, j)] = h[i];
                proj[(j, i)] = h[i];
            }
            let beta = w.norm();
            let exhausted = j + 1 == n;
            if j + 1 < m {
                let next = if beta > 1e-12 * scale {
                    w / beta
                } else {
                    // Invariant subspace found: continue with a fresh orthogonal direction.
                    fresh_direction(&basis, j + 1, &mut rng)
                };
                basis.set_column(j + 1, &next);
            } else {
                residual_norm = if exhausted { 0.0 } else { beta };
                if beta > 0.0 && !exhausted {
                    basis.set_column(m, &(w / beta));
                } else {
                    basis.set_column(m, &DVector::zeros(n));
                }
            }
        }

        let (theta, ritz) = sorted_eigen(&proj);
        let bound = opts.tol * theta[0].max(1.0);
        let estimates_ok = (0..q).all(|i| residual_norm * ritz[(m - 1, i)].abs() <= bound);
        if estimates_ok {
            let vectors = basis.columns(0, m) * ritz.columns(0, q);
            let values = DVector::from_fn(q, |i, _| theta[i]);
            if true_residuals_ok(op, &values, &vectors, bound) {
                return Ok(EigenPairs { values, vectors, restarts: restart, used_dense_fallback: false });
            }
            // Lost orthogonality; restart from the current Ritz approximation.
        }
        if restart == opts.max_restarts {
            break;
        }

        // Thick restart: keep the leading Ritz vectors and the residual direction.
        kept = (q + (m - q) / 2).min(m - 1).max(q.min(m - 1));
        let leading = basis.columns(0, m) * ritz.columns(0, kept);
        let residual_dir = basis.column(m).into_owned();
        proj.fill(0.0);
        for i in 0..kept {
            basis.set_column(i, &leading.column(i));
            proj[(i, i)] = theta[i];
        }
        let next = if residual_dir.norm() > 0.5 {
            residual_dir
        } else {
            fresh_direction(&basis, kept, &mut rng)
        };
        basis.set_column(kept, &next);
        if kept == 0 {
            basis.set_column(0, &random_unit(n, &mut rng));
        }
    }

    if n <= opts.dense_fallback_dim {
        let dense = DMatrix::from_fn(n, n, |_, _| 0.0);
        let dense = (0..n).fold(dense, |mut acc, j| {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            acc.set_column(j, &op.apply(&e));
            acc
        });
        let sym = (&dense + dense.transpose()) * 0.5;
        let (theta, vecs) = sorted_eigen(&sym);
        return Ok(EigenPairs {
            values: DVector::from_fn(q, |i, _| theta[i]),
            vectors: vecs.columns(0, q).into_owned(),
            restarts: opts.max_restarts,
            used_dense_fallback: true,
        });
    }
    Err(Error::EigenNoConvergence { restarts: opts.max_restarts, dim: n })
}

fn random_unit(n: usize, rng: &mut impl Rng) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let norm = v.norm();
        if norm > 1e-8 {
            return v / norm;
        }
    }
}

/// A unit vector orthogonal to the first `cols` columns of `basis`.
fn fresh_direction(basis: &DMatrix<f64>, cols: usize, rng: &mut impl Rng) -> DVector<f64> {
    let n = basis.nrows();
    loop {
        let mut w = random_unit(n, rng);
        for _ in 0..2 {
            let v = basis.columns(0, cols);
            let c = v.tr_mul(&w);
            w -= &v * c;
        }
        let norm = w.norm();
        if norm > 1e-6 {
            return w / norm;
        }
        if cols >= n {
            return DVector::zeros(n);
        }
    }
}

/// Eigen-decomposition of a small symmetric matrix with values sorted descending.
fn sorted_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..a.nrows()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

fn true_residuals_ok<A: SymmetricOperator + ?Sized>(
    op: &A,
    values: &DVector<f64>,
    vectors: &DMatrix<f64>,
    bound: f64,
) -> bool {
    (0..values.len()).all(|i| {
        let v = vectors.column(i).into_owned();
        (op.apply(&v) - &v * values[i]).norm() <= bound
    })
}
