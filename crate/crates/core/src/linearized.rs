//! Linear solution operator `S` of the age-boundary problem
//!
//! ```text
//! d_a u + A_0(a) u = h2,    u(0) - 1/2 l_0(u) = h1,
//! ```
//!
//! and the operators `L u = S(l_0(u), 0)` and
//! `H(lambda, u) = S((lambda + 1/2) l_*(u), -(A(u) - A_0) u)` of the
//! bifurcation form `u = lambda L u + H(lambda, u)`, `lambda = n - 1/2`.

use nalgebra::{DMatrix, DVector, Dyn, LU};

use crate::discretize::{assemble, SpatialMesh, Tridiagonal};
use crate::error::{Error, Result};
use crate::evolution::{build_evolution, AgeGrid, DensityField, EvolutionOperator};
use crate::model::ModelSpec;
use crate::reproduction::{assemble_q, ell_0, ell_star, ReproductionOperator};

/// Precomputed pieces shared by every application of `S`.
#[derive(Debug, Clone)]
pub struct LinearSolveCache {
    model: ModelSpec,
    mesh: SpatialMesh,
    grid: AgeGrid,
    ev0: EvolutionOperator,
    q0: ReproductionOperator,
    lu: LU<f64, Dyn, Dyn>,
    a0: Vec<Tridiagonal>,
}

impl LinearSolveCache {
    pub fn new(model: &ModelSpec, mesh: &SpatialMesh, grid: &AgeGrid) -> Result<Self> {
        let ev0 = build_evolution(model, mesh, grid, None)?;
        let q0 = assemble_q(model, &ev0)?;
        let r = q0.radius()?;
        if r >= 2.0 {
            return Err(Error::Invariant(format!(
                "I - Q_0/2 needs r(Q_0) < 2, got {r}; normalize the model first"
            )));
        }
        let n = mesh.nx();
        let m = DMatrix::<f64>::identity(n, n) - q0.matrix() * 0.5;
        let lu = m.lu();
        if !lu.is_invertible() {
            return Err(Error::Singular("I - Q_0/2".into()));
        }
        let a0 = (0..grid.na())
            .map(|k| assemble(model, mesh, grid.age(k + 1), None).map(|op| op.matrix))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model: model.clone(),
            mesh: *mesh,
            grid: *grid,
            ev0,
            q0,
            lu,
            a0,
        })
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn mesh(&self) -> &SpatialMesh {
        &self.mesh
    }

    pub fn grid(&self) -> &AgeGrid {
        &self.grid
    }

    pub fn ev0(&self) -> &EvolutionOperator {
        &self.ev0
    }

    pub fn q0(&self) -> &ReproductionOperator {
        &self.q0
    }

    fn check_shape(&self, u: &DensityField) -> Result<()> {
        if u.nx() != self.mesh.nx() || u.na() != self.grid.na() {
            return Err(Error::Precondition("field shape does not match the cached grid".into()));
        }
        Ok(())
    }
}

/// `u = Pi_0 w + K_0 h2` with `w = (I - Q_0/2)^{-1} (1/2 l_0(K_0 h2) + h1)`.
pub fn solve_s(cache: &LinearSolveCache, h1: &[f64], h2: &DensityField) -> Result<DensityField> {
    cache.check_shape(h2)?;
    if h1.len() != cache.mesh.nx() {
        return Err(Error::Precondition("h1 length does not match the mesh".into()));
    }
    let k = cache.ev0.apply_k0(h2)?;
    let l0k = ell_0(&cache.model, &cache.grid, &k);
    let rhs = DVector::from_iterator(h1.len(), h1.iter().zip(&l0k).map(|(a, b)| a + 0.5 * b));
    let w = cache
        .lu
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("I - Q_0/2".into()))?;
    Ok(cache.ev0.propagate(w.as_slice()).add_scaled(1.0, &k))
}

/// Residuals of the two equations solved by `S`, as sup norms over the grid:
/// `(u_{k+1} - u_k)/da + A_0(a_{k+1}) u_{k+1} - h2_k` and
/// `u(0) - 1/2 l_0(u) - h1`.
pub fn s_residuals(cache: &LinearSolveCache, h1: &[f64], h2: &DensityField, u: &DensityField) -> Result<(f64, f64)> {
    cache.check_shape(h2)?;
    cache.check_shape(u)?;
    let da = cache.grid.da();
    let mut age_res = 0.0f64;
    for k in 0..cache.grid.na() {
        let au = cache.a0[k].mul_vec(u.row(k + 1));
        for i in 0..u.nx() {
            let r = (u.row(k + 1)[i] - u.row(k)[i]) / da + au[i] - h2.row(k)[i];
            age_res = age_res.max(r.abs());
        }
    }
    let l0 = ell_0(&cache.model, &cache.grid, u);
    let birth_res = u
        .birth()
        .iter()
        .zip(&l0)
        .zip(h1)
        .fold(0.0f64, |m, ((b, l), h)| m.max((b - 0.5 * l - h).abs()));
    Ok((age_res, birth_res))
}

/// `L u = S(l_0(u), 0)`.
pub fn apply_l(cache: &LinearSolveCache, u: &DensityField) -> Result<DensityField> {
    cache.check_shape(u)?;
    let h1 = ell_0(&cache.model, &cache.grid, u);
    solve_s(cache, &h1, &DensityField::zeros(cache.grid.na(), cache.mesh.nx()))
}

/// Nonlinear forcing `f_k = -(A(u_k, a_{k+1}) - A_0(a_{k+1})) u_{k+1}`,
/// aligned with the lagged implicit step so discrete solutions satisfy the
/// bifurcation form exactly.
pub fn nonlinear_forcing(cache: &LinearSolveCache, u: &DensityField) -> Result<DensityField> {
    cache.check_shape(u)?;
    let mut f = DensityField::zeros(cache.grid.na(), cache.mesh.nx());
    for k in 0..cache.grid.na() {
        let a = assemble(&cache.model, &cache.mesh, cache.grid.age(k + 1), Some(u.row(k)))?;
        let star = a.matrix.sub(&cache.a0[k]);
        let v = star.mul_vec(u.row(k + 1));
        for (dst, x) in f.row_mut(k).iter_mut().zip(v) {
            *dst = -x;
        }
    }
    Ok(f)
}

/// `H(lambda, u) = S((lambda + 1/2) l_*(u), f(u))`.
pub fn apply_h(cache: &LinearSolveCache, lambda: f64, u: &DensityField) -> Result<DensityField> {
    if !u.is_finite() {
        return Err(Error::NonFinite("density passed to H".into()));
    }
    let h1: Vec<f64> = ell_star(&cache.model, &cache.grid, u)
        .into_iter()
        .map(|v| (lambda + 0.5) * v)
        .collect();
    let f = nonlinear_forcing(cache, u)?;
    solve_s(cache, &h1, &f)
}

/// `||u - lambda L u - H(lambda, u)||` with `lambda = n - 1/2`.
pub fn bifurcation_residual(cache: &LinearSolveCache, n: f64, u: &DensityField) -> Result<f64> {
    let lambda = n - 0.5;
    let lu = apply_l(cache, u)?;
    let h = apply_h(cache, lambda, u)?;
    Ok(u.add_scaled(-lambda, &lu).add_scaled(-1.0, &h).norm(&cache.grid))
}

/// Dominant eigenvalue of `L` by power iteration on fields.
pub fn dominant_eigenvalue_l(cache: &LinearSolveCache, tol: f64, max_iter: usize) -> Result<f64> {
    let mut v = cache.ev0.propagate(&vec![1.0; cache.mesh.nx()]);
    v = v.scaled(1.0 / v.max_abs());
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let w = apply_l(cache, &v)?;
        let scale = w.max_abs();
        if scale == 0.0 {
            return Ok(0.0);
        }
        let next = w.scaled(1.0 / scale);
        let lambda = apply_l(cache, &next)?.max_abs();
        residual = apply_l(cache, &next)?.add_scaled(-lambda, &next).max_abs();
        v = next;
        if residual <= tol * lambda {
            return Ok(lambda);
        }
    }
    Err(Error::NonConvergence {
        method: "power iteration on L",
        iterations: max_iter,
        residual,
    })
}
