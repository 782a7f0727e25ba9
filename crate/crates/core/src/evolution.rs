//! Discrete evolution operators in age.
//!
//! One implicit Euler step from `a_k` to `a_{k+1}` solves
//! `(I + da M(u_k, a_{k+1})) v_{k+1} = v_k`, where the operator is frozen
//! at the density slice of row `k` (quasilinear lag). Every step matrix is
//! an M-matrix, so propagation maps nonnegative data to nonnegative data.

use rayon::prelude::*;

use crate::discretize::{assemble, SpatialMesh, TridiagonalLu};
use crate::error::{Error, Result};
use crate::model::ModelSpec;

/// Uniform age grid on [0, a_max].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgeGrid {
    na: usize,
    da: f64,
    a_max: f64,
}

impl AgeGrid {
    pub fn new(a_max: f64, na: usize) -> Result<Self> {
        if na < 2 {
            return Err(Error::Invariant(format!("na must be at least 2, got {na}")));
        }
        if !(a_max.is_finite() && a_max > 0.0) {
            return Err(Error::Invariant("a_max must be finite and positive".into()));
        }
        Ok(Self {
            na,
            da: a_max / na as f64,
            a_max,
        })
    }

    pub fn for_model(model: &ModelSpec) -> Result<Self> {
        Self::new(model.a_max, model.na)
    }

    #[inline]
    pub fn na(&self) -> usize {
        self.na
    }

    #[inline]
    pub fn da(&self) -> f64 {
        self.da
    }

    pub fn a_max(&self) -> f64 {
        self.a_max
    }

    /// Age of row `k`; the last row is exactly a_max.
    #[inline]
    pub fn age(&self, k: usize) -> f64 {
        if k == self.na {
            self.a_max
        } else {
            k as f64 * self.da
        }
    }

    /// Trapezoidal quadrature weights for the na + 1 rows.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let mut w = vec![self.da; self.na + 1];
        w[0] = 0.5 * self.da;
        w[self.na] = 0.5 * self.da;
        w
    }
}

/// Density on the age x space grid; row `k` is the profile at age `a_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    nx: usize,
    rows: usize,
    data: Vec<f64>,
    nonnegative: bool,
}

impl DensityField {
    /// The zero field for `na` age steps.
    pub fn zeros(na: usize, nx: usize) -> Self {
        Self {
            nx,
            rows: na + 1,
            data: vec![0.0; (na + 1) * nx],
            nonnegative: true,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let nx = rows.first().map_or(0, Vec::len);
        if rows.len() < 3 || nx == 0 || rows.iter().any(|r| r.len() != nx) {
            return Err(Error::Precondition(
                "rows must be a nonempty rectangle with at least 3 rows".into(),
            ));
        }
        let data: Vec<f64> = rows.concat();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("density field entry".into()));
        }
        Ok(Self {
            nx,
            rows: rows.len(),
            data,
            nonnegative: false,
        })
    }

    #[inline]
    pub fn nx(&self) -> usize {
        self.nx
    }

    /// Number of age steps (rows - 1).
    #[inline]
    pub fn na(&self) -> usize {
        self.rows - 1
    }

    #[inline]
    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.nx..(k + 1) * self.nx]
    }

    #[inline]
    pub fn row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.nx..(k + 1) * self.nx]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.nx)
    }

    /// Birth profile u(0, .).
    pub fn birth(&self) -> &[f64] {
        self.row(0)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Set when the field came from nonnegative data through positive maps.
    pub fn is_flagged_nonnegative(&self) -> bool {
        self.nonnegative
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// L1-in-age norm of the spatial sup norm, trapezoidal in age.
    pub fn norm(&self, grid: &AgeGrid) -> f64 {
        grid.trapezoid_weights()
            .iter()
            .zip(self.rows())
            .map(|(w, row)| w * row.iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .sum()
    }

    pub fn same_shape(&self, other: &DensityField) -> bool {
        self.nx == other.nx && self.rows == other.rows
    }

    /// `self + s * other`.
    pub fn add_scaled(&self, s: f64, other: &DensityField) -> DensityField {
        assert!(self.same_shape(other), "shape mismatch");
        DensityField {
            nx: self.nx,
            rows: self.rows,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + s * b).collect(),
            nonnegative: self.nonnegative && other.nonnegative && s >= 0.0,
        }
    }

    pub fn scaled(&self, s: f64) -> DensityField {
        DensityField {
            nx: self.nx,
            rows: self.rows,
            data: self.data.iter().map(|v| s * v).collect(),
            nonnegative: self.nonnegative && s >= 0.0,
        }
    }

    pub fn max_abs_diff(&self, other: &DensityField) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Sequence of factored implicit steps `(I + da M_k)`, k = 0..na-1.
#[derive(Debug, Clone)]
pub struct EvolutionOperator {
    steps: Vec<TridiagonalLu>,
    frozen: Option<DensityField>,
    grid: AgeGrid,
    nx: usize,
}

impl EvolutionOperator {
    pub fn grid(&self) -> &AgeGrid {
        &self.grid
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn step_count(&self) -> usize {
        self.steps.len()
    }

    /// Density the operator was frozen at; `None` for the linear part.
    pub fn frozen(&self) -> Option<&DensityField> {
        self.frozen.as_ref()
    }

    pub fn is_linear(&self) -> bool {
        self.frozen.is_none()
    }

    /// Advances `v` from row `k` to row `k + 1` in place.
    #[inline]
    pub fn step(&self, k: usize, v: &mut [f64]) {
        self.steps[k].solve_in_place(v);
    }

    /// Rows k of the result are Pi(a_k, 0) B.
    pub fn propagate(&self, b: &[f64]) -> DensityField {
        self.propagate_from(0, b)
    }

    /// Restarts the step sequence at row `start` from `v`; rows before
    /// `start` are zero.
    pub fn propagate_from(&self, start: usize, v: &[f64]) -> DensityField {
        assert_eq!(v.len(), self.nx, "vector length must match the mesh");
        let mut out = DensityField::zeros(self.grid.na(), self.nx);
        out.row_mut(start).copy_from_slice(v);
        for k in start..self.grid.na() {
            let (prev, next) = out.data.split_at_mut((k + 1) * self.nx);
            let next = &mut next[..self.nx];
            next.copy_from_slice(&prev[k * self.nx..]);
            self.step(k, next);
        }
        out.nonnegative = v.iter().all(|&x| x >= 0.0);
        out
    }

    /// Duhamel sum `(K_0 f)(a_k)`: `w_0 = 0`, `w_{k+1} = step_k(w_k + da f_k)`.
    pub fn apply_k0(&self, f: &DensityField) -> Result<DensityField> {
        if !self.is_linear() {
            return Err(Error::Precondition(
                "K_0 needs the evolution operator of the linear part".into(),
            ));
        }
        if f.nx() != self.nx || f.na() != self.grid.na() {
            return Err(Error::Precondition("forcing field shape mismatch".into()));
        }
        let da = self.grid.da();
        let mut out = DensityField::zeros(self.grid.na(), self.nx);
        for k in 0..self.grid.na() {
            let (prev, next) = out.data.split_at_mut((k + 1) * self.nx);
            let next = &mut next[..self.nx];
            for ((n, w), fk) in next.iter_mut().zip(&prev[k * self.nx..]).zip(f.row(k)) {
                *n = w + da * fk;
            }
            self.step(k, next);
        }
        out.nonnegative = f.as_slice().iter().all(|&x| x >= 0.0);
        Ok(out)
    }
}

fn step_factor(
    model: &ModelSpec,
    mesh: &SpatialMesh,
    grid: &AgeGrid,
    k: usize,
    slice: Option<&[f64]>,
) -> Result<TridiagonalLu> {
    assemble(model, mesh, grid.age(k + 1), slice)?.step_factor(grid.da())
}

/// Builds Pi_u for a frozen density `u`, or Pi_0 when `u` is `None`.
pub fn build_evolution(
    model: &ModelSpec,
    mesh: &SpatialMesh,
    grid: &AgeGrid,
    u: Option<&DensityField>,
) -> Result<EvolutionOperator> {
    if let Some(u) = u {
        if u.nx() != mesh.nx() || u.na() != grid.na() {
            return Err(Error::Precondition(format!(
                "density field is {}x{}, grid is {}x{}",
                u.na() + 1,
                u.nx(),
                grid.na() + 1,
                mesh.nx()
            )));
        }
    }
    let steps = (0..grid.na())
        .into_par_iter()
        .map(|k| step_factor(model, mesh, grid, k, u.map(|u| u.row(k))))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvolutionOperator {
        steps,
        frozen: u.cloned(),
        grid: *grid,
        nx: mesh.nx(),
    })
}

/// Self-consistent trajectory `u = Pi_u(., 0) B`.
///
/// Because step `k` only depends on row `k`, marching in age reaches the
/// Picard fixed point exactly. Returns the trajectory and the evolution
/// operator frozen at it.
pub fn march(
    model: &ModelSpec,
    mesh: &SpatialMesh,
    grid: &AgeGrid,
    b: &[f64],
) -> Result<(DensityField, EvolutionOperator)> {
    let nx = mesh.nx();
    if b.len() != nx {
        return Err(Error::Precondition(format!(
            "birth vector has length {}, mesh has {nx} nodes",
            b.len()
        )));
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("birth vector".into()));
    }
    let mut u = DensityField::zeros(grid.na(), nx);
    u.row_mut(0).copy_from_slice(b);
    let mut steps = Vec::with_capacity(grid.na());
    for k in 0..grid.na() {
        let lu = step_factor(model, mesh, grid, k, Some(u.row(k)))?;
        let (prev, next) = u.data.split_at_mut((k + 1) * nx);
        let next = &mut next[..nx];
        next.copy_from_slice(&prev[k * nx..]);
        lu.solve_in_place(next);
        steps.push(lu);
    }
    u.nonnegative = b.iter().all(|&x| x >= 0.0);
    let ev = EvolutionOperator {
        steps,
        frozen: Some(u.clone()),
        grid: *grid,
        nx,
    };
    Ok((u, ev))
}

/// Picard iteration for `u = Pi_u(., 0) B`: rebuild Pi from the latest
/// trajectory until successive trajectories differ by less than `tol`.
/// Returns the trajectory and the number of rebuilds.
pub fn picard_trajectory(
    model: &ModelSpec,
    mesh: &SpatialMesh,
    grid: &AgeGrid,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(DensityField, usize)> {
    let mut u = build_evolution(model, mesh, grid, None)?.propagate(b);
    let mut diff = f64::INFINITY;
    for it in 1..=max_iter {
        let next = build_evolution(model, mesh, grid, Some(&u))?.propagate(b);
        diff = next.max_abs_diff(&u);
        u = next;
        if diff < tol {
            return Ok((u, it));
        }
    }
    Err(Error::NonConvergence {
        method: "Picard trajectory",
        iterations: max_iter,
        residual: diff,
    })
}
