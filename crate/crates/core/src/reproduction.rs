//! Net reproduction operator `Q_u = sum_k w_k diag(beta(u_k)) Pi_u(a_k, 0)`
//! and its Perron pair.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::discretize::SpatialMesh;
use crate::error::{Error, Result};
use crate::evolution::{build_evolution, AgeGrid, DensityField, EvolutionOperator};
use crate::model::ModelSpec;

/// Default relative tolerance on the Perron residual.
pub const PERRON_TOL: f64 = 1e-12;
pub const PERRON_MAX_ITER: usize = 2_000;

/// Tolerance on `|r(Q_0) - 1|` after normalization.
pub const TOL_NORM: f64 = 1e-10;

/// Which density the operator was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Zero,
    Field,
}

/// Dominant eigenvalue and nonnegative eigenvector scaled to unit sup norm.
#[derive(Debug, Clone, PartialEq)]
pub struct PerronPair {
    pub r: f64,
    pub vector: Vec<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct ReproductionOperator {
    matrix: DMatrix<f64>,
    provenance: Provenance,
    perron: OnceLock<PerronPair>,
}

impl ReproductionOperator {
    pub fn from_matrix(matrix: DMatrix<f64>, provenance: Provenance) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::Precondition("reproduction matrix must be square".into()));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("reproduction matrix entry".into()));
        }
        Ok(Self {
            matrix,
            provenance,
            perron: OnceLock::new(),
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn min_entry(&self) -> f64 {
        self.matrix.min()
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (&self.matrix * DVector::from_column_slice(v)).as_slice().to_vec()
    }

    /// Perron pair at the default tolerance, computed once and cached.
    pub fn perron(&self) -> Result<&PerronPair> {
        if let Some(p) = self.perron.get() {
            return Ok(p);
        }
        let p = spectral_radius(self, PERRON_TOL, PERRON_MAX_ITER)?;
        Ok(self.perron.get_or_init(|| p))
    }

    pub fn radius(&self) -> Result<f64> {
        Ok(self.perron()?.r)
    }
}

/// Assembles `Q` for the density `ev` is frozen at (zero for the linear part).
///
/// Column `j` is accumulated along the propagation of the unit vector `e_j`;
/// columns are independent and computed in parallel.
pub fn assemble_q(model: &ModelSpec, ev: &EvolutionOperator) -> Result<ReproductionOperator> {
    let grid = ev.grid();
    let nx = ev.nx();
    let weights = grid.trapezoid_weights();
    let beta: Vec<Vec<f64>> = match ev.frozen() {
        None => vec![vec![model.beta(0.0); nx]; grid.na() + 1],
        Some(u) => u
            .rows()
            .map(|row| row.iter().map(|&v| model.beta(v)).collect())
            .collect(),
    };
    if beta.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("birth modulus along the trajectory".into()));
    }
    let columns: Vec<Vec<f64>> = (0..nx)
        .into_par_iter()
        .map(|j| {
            let mut v = vec![0.0; nx];
            v[j] = 1.0;
            let mut col: Vec<f64> = v.iter().zip(&beta[0]).map(|(x, b)| weights[0] * b * x).collect();
            for k in 0..grid.na() {
                ev.step(k, &mut v);
                for ((c, x), b) in col.iter_mut().zip(&v).zip(&beta[k + 1]) {
                    *c += weights[k + 1] * b * x;
                }
            }
            col
        })
        .collect();
    let matrix = DMatrix::from_fn(nx, nx, |i, j| columns[j][i]);
    let provenance = if ev.is_linear() {
        Provenance::Zero
    } else {
        Provenance::Field
    };
    ReproductionOperator::from_matrix(matrix, provenance)
}

/// `Q_0` of the model on the given grids.
pub fn assemble_q0(model: &ModelSpec, mesh: &SpatialMesh, grid: &AgeGrid) -> Result<ReproductionOperator> {
    assemble_q(model, &build_evolution(model, mesh, grid, None)?)
}

/// Power-iteration sweeps before switching to shifted inverse iteration.
const POWER_SWEEPS: usize = 500;

/// Power iteration from the all-ones vector for a nonnegative matrix,
/// followed by inverse iteration shifted by the Collatz-Wielandt upper
/// bound when the dominant eigenvalue is nearly tied.
///
/// Stops when `||Q B - r B||_inf <= tol * r`.
pub fn spectral_radius(q: &ReproductionOperator, tol: f64, max_iter: usize) -> Result<PerronPair> {
    let m = q.matrix();
    if m.min() < 0.0 {
        return Err(Error::Precondition("power iteration needs a nonnegative matrix".into()));
    }
    let n = q.dim();
    let converged = |v: &DVector<f64>| {
        let qv = m * v;
        let r = qv.amax();
        let residual = (qv - v * r).amax();
        (r, residual)
    };
    let mut v = DVector::from_element(n, 1.0);
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        if it <= POWER_SWEEPS {
            let w = m * &v;
            let r = w.amax();
            if r == 0.0 {
                return Err(Error::Precondition(
                    "reproduction matrix annihilates the iterate".into(),
                ));
            }
            v = w / r;
        } else {
            let floor = v.amax() * 1e-12;
            v.apply(|x| *x = x.max(floor));
            let qv = m * &v;
            let sigma = qv.iter().zip(v.iter()).map(|(a, b)| a / b).fold(0.0, f64::max);
            let shift = sigma * (1.0 + 1e-14) + f64::MIN_POSITIVE;
            let shifted = DMatrix::from_diagonal_element(n, n, shift) - m;
            let Some(x) = shifted.lu().solve(&v) else {
                break;
            };
            let scale = x.amax();
            if !(scale > 0.0 && scale.is_finite()) {
                break;
            }
            v = x.map(|e| e.abs() / scale);
        }
        let (r, res) = converged(&v);
        residual = res;
        if residual <= tol * r {
            return Ok(PerronPair {
                r,
                vector: v.as_slice().to_vec(),
                iterations: it,
            });
        }
    }
    Err(Error::NonConvergence {
        method: "Perron power iteration",
        iterations: max_iter,
        residual,
    })
}

/// Rescales `c_b` so that `r(Q_0) = 1`; returns the new model and the
/// radius before rescaling.
pub fn normalize(model: &ModelSpec, mesh: &SpatialMesh, grid: &AgeGrid) -> Result<(ModelSpec, f64)> {
    let ev0 = build_evolution(model, mesh, grid, None)?;
    let r_before = assemble_q(model, &ev0)?.radius()?;
    if !(r_before > 0.0) {
        return Err(Error::Invariant(format!("r(Q_0) = {r_before} must be positive")));
    }
    let mut out = model.with_birth_scale(model.birth_scale / r_before);
    for _ in 0..3 {
        let r = assemble_q(&out, &ev0)?.radius()?;
        if (r - 1.0).abs() <= TOL_NORM {
            return Ok((out, r_before));
        }
        out = out.with_birth_scale(out.birth_scale / r);
    }
    Err(Error::NonConvergence {
        method: "birth-scale normalization",
        iterations: 3,
        residual: (assemble_q(&out, &ev0)?.radius()? - 1.0).abs(),
    })
}

/// Reciprocals of the leading real eigenvalues, with notes on skipped ones.
#[derive(Debug, Clone, PartialEq)]
pub struct CharacteristicValues {
    pub values: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub notes: Vec<String>,
}

fn start_vector(n: usize) -> DVector<f64> {
    DVector::from_fn(n, |i, _| 1.0 + 0.1 * ((i + 1) as f64).sin())
}

/// Power iteration for a real dominant eigenvalue of a general matrix.
/// Returns `None` when the iterate does not settle (complex or tied pair).
fn dominant_real(m: &DMatrix<f64>, tol: f64, max_iter: usize) -> Option<(f64, DVector<f64>)> {
    let mut v = start_vector(m.nrows()).normalize();
    for _ in 0..max_iter {
        let w = m * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return Some((0.0, v));
        }
        let mut next = w / norm;
        let lead = next.iamax();
        if next[lead] < 0.0 {
            next = -next;
        }
        let lambda = next.dot(&(m * &next));
        let res = (m * &next - &next * lambda).norm();
        v = next;
        if res <= tol * lambda.abs().max(f64::MIN_POSITIVE) {
            return Some((lambda, v));
        }
    }
    None
}

/// Leading `k` characteristic values by power iteration with Hotelling
/// deflation `Q <- Q - lambda v w^T / (w^T v)`, `w` the left eigenvector.
pub fn characteristic_values(q: &ReproductionOperator, k: usize) -> Result<CharacteristicValues> {
    let n = q.dim();
    if k == 0 || k > n {
        return Err(Error::Precondition(format!("k must lie in 1..={n}, got {k}")));
    }
    let tol = 1e-12;
    let max_iter = 100_000;
    let mut m = q.matrix().clone();
    let mut out = CharacteristicValues {
        values: Vec::with_capacity(k),
        eigenvalues: Vec::with_capacity(k),
        notes: Vec::new(),
    };
    while out.eigenvalues.len() < k {
        let Some((lambda, v)) = dominant_real(&m, tol, max_iter) else {
            out.notes.push(format!(
                "no real dominant eigenvalue after {} found; remaining spectrum skipped",
                out.eigenvalues.len()
            ));
            break;
        };
        if lambda.abs() <= 1e-14 * q.matrix().amax().max(1.0) {
            out.notes
                .push("remaining eigenvalues are zero and have no characteristic value".into());
            break;
        }
        let Some((mu, w)) = dominant_real(&m.transpose(), tol, max_iter) else {
            return Err(Error::Singular(
                "left eigenvector did not converge during deflation".into(),
            ));
        };
        let overlap = w.dot(&v);
        if (mu - lambda).abs() > 1e-8 * lambda.abs() || overlap.abs() < 1e-10 {
            return Err(Error::Singular(format!(
                "deflation breakdown at eigenvalue {lambda:e} (left/right overlap {overlap:e})"
            )));
        }
        m -= (&v * w.transpose()) * (lambda / overlap);
        out.eigenvalues.push(lambda);
        out.values.push(1.0 / lambda);
    }
    Ok(out)
}

/// `l(u) = sum_k w_k beta(u_k) u_k`.
pub fn ell(model: &ModelSpec, grid: &AgeGrid, u: &DensityField) -> Vec<f64> {
    weighted_birth(grid, u, |v| model.beta(v) * v)
}

/// `l_0(u) = beta(0) sum_k w_k u_k`.
pub fn ell_0(model: &ModelSpec, grid: &AgeGrid, u: &DensityField) -> Vec<f64> {
    let b0 = model.beta(0.0);
    weighted_birth(grid, u, |v| b0 * v)
}

/// `l_*(u) = sum_k w_k (beta(u_k) - beta(0)) u_k`.
pub fn ell_star(model: &ModelSpec, grid: &AgeGrid, u: &DensityField) -> Vec<f64> {
    let b0 = model.beta(0.0);
    weighted_birth(grid, u, |v| (model.beta(v) - b0) * v)
}

fn weighted_birth(grid: &AgeGrid, u: &DensityField, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut acc = vec![0.0; u.nx()];
    for (w, row) in grid.trapezoid_weights().iter().zip(u.rows()) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += w * f(v);
        }
    }
    acc
}
