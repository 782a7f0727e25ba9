//! Parameter-free equilibria `u(0) = Q(u) u(0)` via the damped map
//! `B <- (1 - d) B + d Q(u_B) B`, `u_B = Pi_{u_B}(., 0) B`, and sampled
//! checks of the conical-shell hypotheses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::discretize::SpatialMesh;
use crate::error::{Error, Result};
use crate::evolution::{build_evolution, march, AgeGrid, DensityField};
use crate::model::ModelSpec;
use crate::reproduction::{assemble_q, ell};

/// Birth vectors with sup norm below this count as collapsed.
pub const COLLAPSE_TOL: f64 = 1e-12;
pub const DEFAULT_DAMPING: f64 = 0.5;
pub const DEFAULT_STARTS: usize = 3;

/// Slack allowed on `r(Q(u)) <= 1` for large samples.
const SHELL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ShellSample {
    pub norm: f64,
    pub r: f64,
    pub min_q_minus_i: f64,
    pub small: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShellReport {
    pub tau0: f64,
    pub tau1: f64,
    pub samples: Vec<ShellSample>,
    /// `Q(u) - I >= 0` entrywise on every small sample.
    pub verdict_small: bool,
    /// `r(Q(u)) <= 1` on every large sample.
    pub verdict_large: bool,
}

fn random_profile(
    model: &ModelSpec,
    mesh: &SpatialMesh,
    grid: &AgeGrid,
    rng: &mut ChaCha8Rng,
    target: f64,
) -> Result<DensityField> {
    let b: Vec<f64> = (0..mesh.nx()).map(|_| rng.random_range(0.05..1.0)).collect();
    let shape = build_evolution(model, mesh, grid, None)?.propagate(&b);
    Ok(shape.scaled(target / shape.norm(grid)))
}

/// Samples nonnegative profiles with `||u||` in `tau0 [1/2, 1]` and in
/// `tau1 [1, 2]` and evaluates the shell conditions on each. Advisory only.
pub fn check_shell_conditions(
    model: &ModelSpec,
    mesh: &SpatialMesh,
    grid: &AgeGrid,
    tau0: f64,
    tau1: f64,
    n_samples: usize,
    seed: u64,
) -> Result<ShellReport> {
    if !(tau0 > 0.0 && tau0 < tau1 && tau1.is_finite()) {
        return Err(Error::Precondition(format!(
            "shell radii need 0 < tau0 < tau1, got {tau0} and {tau1}"
        )));
    }
    if n_samples == 0 {
        return Err(Error::Precondition("at least one sample per radius is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut profiles = Vec::with_capacity(2 * n_samples);
    for small in [true, false] {
        for _ in 0..n_samples {
            let target = if small {
                tau0 * rng.random_range(0.5..=1.0)
            } else {
                tau1 * rng.random_range(1.0..=2.0)
            };
            profiles.push((small, random_profile(model, mesh, grid, &mut rng, target)?));
        }
    }
    let samples = profiles
        .par_iter()
        .map(|(small, u)| {
            let q = assemble_q(model, &build_evolution(model, mesh, grid, Some(u))?)?;
            let m = q.matrix();
            let min_q_minus_i = (0..q.dim())
                .flat_map(|i| (0..q.dim()).map(move |j| (i, j)))
                .map(|(i, j)| m[(i, j)] - if i == j { 1.0 } else { 0.0 })
                .fold(f64::INFINITY, f64::min);
            Ok(ShellSample {
                norm: u.norm(grid),
                r: q.radius()?,
                min_q_minus_i,
                small: *small,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let verdict_small = samples.iter().filter(|s| s.small).all(|s| s.min_q_minus_i >= 0.0);
    let verdict_large = samples.iter().filter(|s| !s.small).all(|s| s.r <= 1.0 + SHELL_TOL);
    Ok(ShellReport {
        tau0,
        tau1,
        samples,
        verdict_small,
        verdict_large,
    })
}

#[derive(Debug, Clone)]
pub struct FixedPoint {
    pub u: DensityField,
    pub b: Vec<f64>,
    pub iterations: usize,
    /// `||B - Q(u) B||_inf`.
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub enum FixedPointOutcome {
    Converged(FixedPoint),
    TrivialCollapse { iterations: usize },
}

impl FixedPointOutcome {
    pub fn converged(&self) -> Option<&FixedPoint> {
        match self {
            FixedPointOutcome::Converged(fp) => Some(fp),
            FixedPointOutcome::TrivialCollapse { .. } => None,
        }
    }
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Damped iteration of `B -> Q(u_B) B` from `b_init`.
pub fn solve_fixedpoint(
    model: &ModelSpec,
    mesh: &SpatialMesh,
    grid: &AgeGrid,
    b_init: &[f64],
    damping: f64,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPointOutcome> {
    if b_init.len() != mesh.nx() {
        return Err(Error::Precondition("initial birth vector has the wrong length".into()));
    }
    if b_init.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Precondition(
            "initial birth vector must be finite and nonnegative".into(),
        ));
    }
    if !(damping > 0.0 && damping <= 1.0) {
        return Err(Error::Precondition(format!(
            "damping must lie in (0, 1], got {damping}"
        )));
    }
    let mut b = b_init.to_vec();
    let mut change = f64::INFINITY;
    for it in 0..=max_iter {
        if sup(&b) < COLLAPSE_TOL {
            return Ok(FixedPointOutcome::TrivialCollapse { iterations: it });
        }
        let (u, _) = march(model, mesh, grid, &b)?;
        let qb = ell(model, grid, &u);
        let residual = b.iter().zip(&qb).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        if change < tol && residual < tol {
            return Ok(FixedPointOutcome::Converged(FixedPoint {
                u,
                b,
                iterations: it,
                residual,
            }));
        }
        if it == max_iter {
            break;
        }
        let next: Vec<f64> = b
            .iter()
            .zip(&qb)
            .map(|(x, y)| (1.0 - damping) * x + damping * y)
            .collect();
        change = next.iter().zip(&b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        b = next;
    }
    Err(Error::NonConvergence {
        method: "damped fixed-point iteration",
        iterations: max_iter,
        residual: change,
    })
}

/// Runs `starts` independent iterations from seeded random nonnegative
/// vectors with entries in `(0, scale)`.
#[allow(clippy::too_many_arguments)]
pub fn multistart(
    model: &ModelSpec,
    mesh: &SpatialMesh,
    grid: &AgeGrid,
    starts: usize,
    scale: f64,
    damping: f64,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Vec<Result<FixedPointOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inits: Vec<Vec<f64>> = (0..starts)
        .map(|_| (0..mesh.nx()).map(|_| scale * rng.random_range(0.01..1.0)).collect())
        .collect();
    inits
        .par_iter()
        .map(|b| solve_fixedpoint(model, mesh, grid, b, damping, tol, max_iter))
        .collect()
}

/// `r(Q(u*))` at a converged fixed point.
pub fn fixed_point_radius(model: &ModelSpec, mesh: &SpatialMesh, grid: &AgeGrid, fp: &FixedPoint) -> Result<f64> {
    let ev = build_evolution(model, mesh, grid, Some(&fp.u))?;
    assemble_q(model, &ev)?.radius()
}
