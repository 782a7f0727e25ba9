//! Continuation of the positive solution branch from the bifurcation point
//! `(n, u) = (1, 0)`.
//!
//! The unknowns are the birth vector `B = u(0)` and the intensity `n`; the
//! density is recovered as the self-consistent trajectory `u = Pi_u(., 0) B`
//! and the equation is `G(B; n) = B - n l(u) = 0`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::discretize::SpatialMesh;
use crate::error::{Error, Result};
use crate::evolution::{march, AgeGrid, DensityField};
use crate::linearized::{bifurcation_residual, LinearSolveCache};
use crate::model::ModelSpec;
use crate::reproduction::{assemble_q, ell, TOL_NORM};

/// Birth vectors with sup norm below this are the trivial solution.
pub const TRIVIAL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuationSettings {
    pub eps0: f64,
    pub step: f64,
    pub step_min: f64,
    pub max_points: usize,
    pub n_cap: f64,
    pub norm_cap: f64,
    /// Relative Newton tolerance on `||G||_inf / ||B||_inf`.
    pub tol: f64,
    pub tol_identity: f64,
    pub tol_pos: f64,
    pub max_newton: usize,
}

impl Default for ContinuationSettings {
    fn default() -> Self {
        Self {
            eps0: 1e-2,
            step: 0.05,
            step_min: 1e-4,
            max_points: 20,
            n_cap: 10.0,
            norm_cap: 1e3,
            tol: 1e-11,
            tol_identity: 1e-6,
            tol_pos: 1e-10,
            max_newton: 25,
        }
    }
}

impl ContinuationSettings {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("eps0", self.eps0 >= 0.0),
            ("step", self.step > 0.0),
            ("step_min", self.step_min > 0.0 && self.step_min <= self.step),
            ("tol", self.tol > 0.0),
            ("tol_identity", self.tol_identity > 0.0),
            ("tol_pos", self.tol_pos > 0.0),
            ("n_cap", self.n_cap > 1.0),
            ("norm_cap", self.norm_cap > 1.0),
            ("max_newton", self.max_newton > 0),
        ];
        for (name, ok) in positive {
            if !ok {
                return Err(Error::Precondition(format!(
                    "continuation setting {name} is out of range"
                )));
            }
        }
        Ok(())
    }
}

/// A solution `(n, u)` with its diagnostics.
#[derive(Debug, Clone)]
pub struct BranchPoint {
    pub n: f64,
    pub u: DensityField,
    pub b: Vec<f64>,
    pub r_qu: f64,
    pub identity_residual: f64,
    pub residual_direct: f64,
    pub bifurcation_residual: f64,
    pub min_u: f64,
    pub eps: f64,
    pub trivial: bool,
    pub newton_iterations: usize,
}

/// Why tracing stopped.
#[derive(Debug, Clone, PartialEq)]
pub enum Termination {
    MaxPoints,
    NCap,
    NormCap,
    /// The corrector fell back onto the trivial solution at this `n`.
    TrivialCollapse {
        n: f64,
    },
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub points: Vec<BranchPoint>,
    pub termination: Termination,
}

impl Branch {
    pub fn nontrivial(&self) -> impl Iterator<Item = &BranchPoint> {
        self.points.iter().filter(|p| !p.trivial)
    }
}

/// Extra equation closing the Newton system in `(B, n)`.
#[derive(Debug, Clone)]
pub enum CorrectorMode {
    /// `n` is held at the given value.
    FixedN,
    /// `<t, z - z_last>_w = ds` in the weighted norm `||B||^2/nx + n^2`.
    Arclength {
        last: (Vec<f64>, f64),
        tangent: (Vec<f64>, f64),
        ds: f64,
    },
    /// `<d, B> / <d, d> = amplitude`.
    Amplitude { direction: Vec<f64>, amplitude: f64 },
}

/// Solver state for one normalized model on fixed grids.
#[derive(Debug, Clone)]
pub struct Continuation {
    cache: LinearSolveCache,
    settings: ContinuationSettings,
    b_perron: Vec<f64>,
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

impl Continuation {
    pub fn new(model: &ModelSpec, mesh: &SpatialMesh, grid: &AgeGrid, settings: ContinuationSettings) -> Result<Self> {
        settings.validate()?;
        let cache = LinearSolveCache::new(model, mesh, grid)?;
        let perron = cache.q0().perron()?;
        if (perron.r - 1.0).abs() > TOL_NORM {
            return Err(Error::Precondition(format!(
                "model is not normalized: r(Q_0) = {:.12}",
                perron.r
            )));
        }
        let b_perron = perron.vector.clone();
        Ok(Self {
            cache,
            settings,
            b_perron,
        })
    }

    pub fn cache(&self) -> &LinearSolveCache {
        &self.cache
    }

    pub fn settings(&self) -> &ContinuationSettings {
        &self.settings
    }

    pub fn b_perron(&self) -> &[f64] {
        &self.b_perron
    }

    fn nx(&self) -> usize {
        self.cache.mesh().nx()
    }

    /// `G(B; n)` together with `l(u)` and the trajectory.
    fn residual(&self, b: &[f64], n: f64) -> Result<(Vec<f64>, Vec<f64>, DensityField)> {
        let c = &self.cache;
        let (u, _) = march(c.model(), c.mesh(), c.grid(), b)?;
        let l = ell(c.model(), c.grid(), &u);
        if l.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("birth functional".into()));
        }
        let g = b.iter().zip(&l).map(|(bi, li)| bi - n * li).collect();
        Ok((g, l, u))
    }

    fn constraint(&self, mode: &CorrectorMode, n_fixed: f64, b: &[f64], n: f64) -> (f64, Vec<f64>, f64) {
        let nx = self.nx() as f64;
        match mode {
            CorrectorMode::FixedN => (n - n_fixed, vec![0.0; b.len()], 1.0),
            CorrectorMode::Amplitude { direction, amplitude } => {
                let dd: f64 = direction.iter().map(|d| d * d).sum();
                let proj: f64 = direction.iter().zip(b).map(|(d, x)| d * x).sum::<f64>() / dd;
                (proj - amplitude, direction.iter().map(|d| d / dd).collect(), 0.0)
            }
            CorrectorMode::Arclength { last, tangent, ds } => {
                let dot: f64 = tangent
                    .0
                    .iter()
                    .zip(b)
                    .zip(&last.0)
                    .map(|((t, x), l)| t * (x - l))
                    .sum::<f64>()
                    / nx
                    + tangent.1 * (n - last.1);
                (dot - ds, tangent.0.iter().map(|t| t / nx).collect(), tangent.1)
            }
        }
    }

    /// Newton solve of `G(B; n) = 0` plus the mode's closing equation.
    pub fn correct(&self, n: f64, b_guess: &[f64], mode: &CorrectorMode) -> Result<BranchPoint> {
        let nx = self.nx();
        if b_guess.len() != nx || !n.is_finite() {
            return Err(Error::Precondition(
                "corrector guess has the wrong shape or is not finite".into(),
            ));
        }
        if b_guess.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("corrector guess".into()));
        }
        let n_fixed = n;
        let mut b = b_guess.to_vec();
        let mut n = n;
        let (mut g, mut l, mut u) = self.residual(&b, n)?;
        let mut initial_merit = f64::NAN;
        for it in 0..=self.settings.max_newton {
            let (c, c_row, c_n) = self.constraint(mode, n_fixed, &b, n);
            let g_norm = sup(&g);
            let merit = g_norm.max(c.abs());
            if initial_merit.is_nan() {
                initial_merit = merit.max(1e-300);
            }
            if g_norm <= self.settings.tol * sup(&b) + 1e-15 && c.abs() <= 1e-13 * (1.0 + n.abs()) {
                return self.finish(n, u, &b, it);
            }
            if it == self.settings.max_newton || !merit.is_finite() || merit > 1e6 * initial_merit {
                return Err(Error::NonConvergence {
                    method: "Newton corrector",
                    iterations: it,
                    residual: merit,
                });
            }
            let h = 1e-6 * (1.0 + sup(&b));
            let columns = (0..nx)
                .into_par_iter()
                .map(|j| {
                    let mut bp = b.clone();
                    bp[j] += h;
                    let (gp, _, _) = self.residual(&bp, n)?;
                    Ok(gp.iter().zip(&g).map(|(a, b0)| (a - b0) / h).collect::<Vec<f64>>())
                })
                .collect::<Result<Vec<_>>>()?;
            let jac = DMatrix::from_fn(nx + 1, nx + 1, |i, j| match (i < nx, j < nx) {
                (true, true) => columns[j][i],
                (true, false) => -l[i],
                (false, true) => c_row[j],
                (false, false) => c_n,
            });
            let rhs = DVector::from_iterator(nx + 1, g.iter().map(|v| -v).chain(std::iter::once(-c)));
            let delta = jac
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::Singular("corrector Jacobian".into()))?;
            let mut lambda = 1.0;
            loop {
                let bt: Vec<f64> = b.iter().zip(delta.iter()).map(|(x, d)| x + lambda * d).collect();
                let nt = n + lambda * delta[nx];
                match self.residual(&bt, nt) {
                    Ok((gt, lt, ut)) => {
                        b = bt;
                        n = nt;
                        g = gt;
                        l = lt;
                        u = ut;
                        break;
                    }
                    Err(e) if lambda < 1e-3 => return Err(e),
                    Err(_) => lambda *= 0.5,
                }
            }
        }
        unreachable!("the Newton loop returns on its last iteration")
    }

    fn finish(&self, n: f64, u: DensityField, b: &[f64], iterations: usize) -> Result<BranchPoint> {
        let min_u = u.min();
        if min_u < -self.settings.tol_pos {
            return Err(Error::NegativeDensity {
                min_u,
                tol: self.settings.tol_pos,
            });
        }
        if sup(b) < TRIVIAL_TOL {
            let mut p = self.trivial_point();
            p.n = n;
            p.identity_residual = (n * p.r_qu - 1.0).abs();
            p.newton_iterations = iterations;
            return Ok(p);
        }
        self.diagnose(n, u, b.to_vec(), iterations)
    }

    /// Diagnostics for a solution candidate `(n, u)` with `u = Pi_u B`.
    pub fn diagnose(&self, n: f64, u: DensityField, b: Vec<f64>, iterations: usize) -> Result<BranchPoint> {
        let c = &self.cache;
        let (_, ev) = march(c.model(), c.mesh(), c.grid(), &b)?;
        let r_qu = assemble_q(c.model(), &ev)?.radius()?;
        let l = ell(c.model(), c.grid(), &u);
        let residual_direct = b.iter().zip(&l).fold(0.0f64, |m, (x, y)| m.max((x - n * y).abs()));
        Ok(BranchPoint {
            n,
            identity_residual: (n * r_qu - 1.0).abs(),
            residual_direct,
            bifurcation_residual: bifurcation_residual(c, n, &u)?,
            min_u: u.min(),
            eps: u.norm(c.grid()),
            u,
            b,
            r_qu,
            trivial: false,
            newton_iterations: iterations,
        })
    }

    /// The bifurcation point `(1, 0)`.
    pub fn trivial_point(&self) -> BranchPoint {
        let grid = self.cache.grid();
        let r0 = self.cache.q0().perron().map_or(1.0, |p| p.r);
        BranchPoint {
            n: 1.0,
            u: DensityField::zeros(grid.na(), self.nx()),
            b: vec![0.0; self.nx()],
            r_qu: r0,
            identity_residual: (r0 - 1.0).abs(),
            residual_direct: 0.0,
            bifurcation_residual: 0.0,
            min_u: 0.0,
            eps: 0.0,
            trivial: true,
            newton_iterations: 0,
        }
    }

    /// Checks the accepted-point invariants.
    pub fn check_point(&self, p: &BranchPoint) -> Result<()> {
        if p.trivial {
            return Ok(());
        }
        if p.residual_direct > self.settings.tol * sup(&p.b) + 1e-15 {
            return Err(Error::Invariant(format!(
                "direct residual {:e} above corrector tolerance",
                p.residual_direct
            )));
        }
        if p.identity_residual > self.settings.tol_identity {
            return Err(Error::Invariant(format!(
                "branch identity n r(Q_u) = 1 violated by {:e}",
                p.identity_residual
            )));
        }
        if p.min_u < -self.settings.tol_pos {
            return Err(Error::NegativeDensity {
                min_u: p.min_u,
                tol: self.settings.tol_pos,
            });
        }
        Ok(())
    }

    /// Corrects the predictor `eps0 Pi_0 B_perron` at `n = 1`, holding the
    /// Perron component of `B` at `eps0`.
    pub fn first_step(&self, eps0: f64) -> Result<BranchPoint> {
        if eps0 == 0.0 {
            return Ok(self.trivial_point());
        }
        if !(eps0 > 0.0 && eps0.is_finite()) {
            return Err(Error::Precondition("eps0 must be nonnegative".into()));
        }
        let guess: Vec<f64> = self.b_perron.iter().map(|v| eps0 * v).collect();
        let mode = CorrectorMode::Amplitude {
            direction: self.b_perron.clone(),
            amplitude: eps0,
        };
        let p = self.correct(1.0, &guess, &mode)?;
        self.check_point(&p)?;
        Ok(p)
    }

    /// `||u(eps) - eps Pi_0 B_perron|| / eps` for the first-step solution at
    /// amplitude `eps`.
    pub fn expansion_defect(&self, eps: f64) -> Result<f64> {
        if !(eps > 0.0) {
            return Err(Error::Precondition("expansion defect needs eps > 0".into()));
        }
        let p = self.first_step(eps)?;
        let lin = self.cache.ev0().propagate(&self.b_perron);
        Ok(p.u.add_scaled(-eps, &lin).norm(self.cache.grid()) / eps)
    }

    /// Perron amplitude `<B_perron, B> / <B_perron, B_perron>` of a birth vector.
    pub fn amplitude(&self, b: &[f64]) -> f64 {
        let dd: f64 = self.b_perron.iter().map(|d| d * d).sum();
        self.b_perron.iter().zip(b).map(|(d, x)| d * x).sum::<f64>() / dd
    }

    fn weighted_norm(&self, b: &[f64], n: f64) -> f64 {
        (b.iter().map(|v| v * v).sum::<f64>() / self.nx() as f64 + n * n).sqrt()
    }

    /// First step followed by pseudo-arclength steps with a secant predictor.
    pub fn trace(&self) -> Result<Branch> {
        let s = &self.settings;
        let mut points = vec![self.trivial_point()];
        if s.max_points == 0 {
            return Ok(Branch {
                points,
                termination: Termination::MaxPoints,
            });
        }
        points.push(self.first_step(s.eps0)?);
        let mut ds = s.step;
        let termination = loop {
            let last = points.last().expect("branch is nonempty");
            if last.n > s.n_cap {
                break Termination::NCap;
            }
            if last.eps > s.norm_cap {
                break Termination::NormCap;
            }
            if points.len() > s.max_points {
                break Termination::MaxPoints;
            }
            let prev = &points[points.len() - 2];
            let db: Vec<f64> = last.b.iter().zip(&prev.b).map(|(a, b)| a - b).collect();
            let dn = last.n - prev.n;
            let len = self.weighted_norm(&db, dn);
            let tangent: (Vec<f64>, f64) = (db.iter().map(|v| v / len).collect(), dn / len);
            let outcome = loop {
                let guess: Vec<f64> = last.b.iter().zip(&tangent.0).map(|(b, t)| b + ds * t).collect();
                let mode = CorrectorMode::Arclength {
                    last: (last.b.clone(), last.n),
                    tangent: tangent.clone(),
                    ds,
                };
                match self
                    .correct(last.n + ds * tangent.1, &guess, &mode)
                    .and_then(|p| self.check_point(&p).map(|_| p))
                {
                    Ok(p) => break Ok(p),
                    Err(e) => {
                        ds *= 0.5;
                        if ds < s.step_min {
                            break Err(e);
                        }
                    }
                }
            };
            let p = outcome?;
            if p.trivial {
                break Termination::TrivialCollapse { n: p.n };
            }
            if p.newton_iterations <= 4 {
                ds = (2.0 * ds).min(s.step);
            }
            points.push(p);
        };
        Ok(Branch { points, termination })
    }
}

/// Traces the branch of a normalized model.
pub fn trace_branch(
    model: &ModelSpec,
    mesh: &SpatialMesh,
    grid: &AgeGrid,
    settings: ContinuationSettings,
) -> Result<Branch> {
    Continuation::new(model, mesh, grid, settings)?.trace()
}

/// One named inequality evaluated on the visited set.
#[derive(Debug, Clone, PartialEq)]
pub struct StatCheck {
    pub name: &'static str,
    pub value: f64,
    pub passed: bool,
}

/// Spectrum and solution-set statistics over the nontrivial visited points.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchStats {
    pub sigma_i: f64,
    pub sigma_s: f64,
    pub n_i: f64,
    pub n_s: f64,
    pub max_identity: f64,
    pub checks: Vec<StatCheck>,
}

impl BranchStats {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Computes `sigma_i = inf n`, `sigma_s = sup n`, `N_i = inf r(Q_u)` and
/// `N_s = sup r(Q_u)`, and checks the identities they inherit from
/// `n r(Q_u) = 1`. `sigma_tol` bounds how far `sigma_i` may exceed 1, since
/// the visited set stops short of the bifurcation point.
pub fn branch_stats(points: &[BranchPoint], tol_identity: f64, sigma_tol: f64) -> Result<BranchStats> {
    let nontrivial: Vec<&BranchPoint> = points.iter().filter(|p| !p.trivial).collect();
    if nontrivial.is_empty() {
        return Err(Error::Precondition("branch has no nontrivial points".into()));
    }
    let fold = |f: fn(&BranchPoint) -> f64, init: f64, pick: fn(f64, f64) -> f64| {
        nontrivial.iter().map(|p| f(p)).fold(init, pick)
    };
    let sigma_i = fold(|p| p.n, f64::INFINITY, f64::min);
    let sigma_s = fold(|p| p.n, f64::NEG_INFINITY, f64::max);
    let n_i = fold(|p| p.r_qu, f64::INFINITY, f64::min);
    let n_s = fold(|p| p.r_qu, f64::NEG_INFINITY, f64::max);
    let max_identity = nontrivial
        .iter()
        .map(|p| (p.n * p.r_qu - 1.0).abs())
        .fold(0.0, f64::max);
    let checks = vec![
        StatCheck {
            name: "n r(Q_u) = 1 at every point",
            value: max_identity,
            passed: max_identity <= tol_identity,
        },
        StatCheck {
            name: "sigma_s N_i = 1",
            value: sigma_s * n_i,
            passed: (sigma_s * n_i - 1.0).abs() <= tol_identity,
        },
        StatCheck {
            name: "sigma_i N_s = 1",
            value: sigma_i * n_s,
            passed: (sigma_i * n_s - 1.0).abs() <= tol_identity,
        },
        StatCheck {
            name: "0 <= sigma_i <= 1",
            value: sigma_i,
            passed: sigma_i >= 0.0 && sigma_i <= 1.0 + sigma_tol,
        },
        StatCheck {
            name: "sigma_s >= 1",
            value: sigma_s,
            passed: sigma_s >= 1.0 - sigma_tol,
        },
    ];
    Ok(BranchStats {
        sigma_i,
        sigma_s,
        n_i,
        n_s,
        max_identity,
        checks,
    })
}

/// `n` where the branch first reaches `||u|| = target`, by linear
/// interpolation between the bracketing points.
pub fn n_at_norm(points: &[BranchPoint], target: f64) -> Option<f64> {
    points.windows(2).find_map(|w| {
        let (p, q) = (&w[0], &w[1]);
        if (p.eps - target) * (q.eps - target) <= 0.0 && p.eps != q.eps {
            let t = (target - p.eps) / (q.eps - p.eps);
            Some(p.n + t * (q.n - p.n))
        } else {
            None
        }
    })
}
