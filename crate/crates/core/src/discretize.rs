//! Finite-difference realization of the spatial operator
//! `-(D w')' + g(u, u') w' + h(u, u') w + mu(u, a) w` on (0, 1).
//!
//! Diffusion uses the conservative three-point stencil with arithmetic
//! half-node averages of D. Drift is upwinded per node so every assembled
//! matrix is a Z-matrix: off-diagonals are nonpositive, and an implicit
//! step `I + da M` with positive pivots has a nonnegative inverse. The
//! Dirichlet node x = 0 is eliminated; a Robin end at x = 1 is closed with
//! a ghost node, a Dirichlet end is eliminated like the left one.

use crate::error::{Error, Result};
use crate::model::{ModelSpec, RightBoundary, Transport};

/// Uniform mesh of the unknown nodes in (0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialMesh {
    nx: usize,
    dx: f64,
    right: RightBoundary,
}

impl SpatialMesh {
    pub fn new(nx: usize, right: RightBoundary) -> Result<Self> {
        if nx < 3 {
            return Err(Error::Invariant(format!("nx must be at least 3, got {nx}")));
        }
        let intervals = match right {
            RightBoundary::Robin => nx,
            RightBoundary::Dirichlet => nx + 1,
        };
        Ok(Self {
            nx,
            dx: 1.0 / intervals as f64,
            right,
        })
    }

    /// Mesh with the model's default size and boundary kind.
    pub fn for_model(model: &ModelSpec) -> Result<Self> {
        Self::new(model.nx, model.right_boundary)
    }

    #[inline]
    pub fn nx(&self) -> usize {
        self.nx
    }

    #[inline]
    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn right(&self) -> RightBoundary {
        self.right
    }

    /// Coordinate of unknown `i` (0-based); node `nx - 1` sits at x = 1 for
    /// a Robin end.
    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        if self.right == RightBoundary::Robin && i + 1 == self.nx {
            1.0
        } else {
            (i + 1) as f64 * self.dx
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.nx).map(|i| self.x(i)).collect()
    }

    /// Gradient of a nodal profile: centered differences using the zero
    /// Dirichlet values beyond the mesh, one-sided at a Robin end.
    pub fn gradient(&self, u: &[f64]) -> Vec<f64> {
        let n = self.nx;
        (0..n)
            .map(|i| {
                let left = if i == 0 { 0.0 } else { u[i - 1] };
                if i + 1 < n {
                    (u[i + 1] - left) / (2.0 * self.dx)
                } else {
                    match self.right {
                        RightBoundary::Robin => (u[i] - u[i - 1]) / self.dx,
                        RightBoundary::Dirichlet => -left / (2.0 * self.dx),
                    }
                }
            })
            .collect()
    }
}

/// Tridiagonal matrix; `lower[0]` and `upper[n - 1]` are unused zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiagonal {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Tridiagonal {
    pub fn zeros(n: usize) -> Self {
        Self {
            lower: vec![0.0; n],
            diag: vec![0.0; n],
            upper: vec![0.0; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            diag: vec![1.0; n],
            ..Self::zeros(n)
        }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.diag.len()
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n();
        (0..n)
            .map(|i| {
                let mut s = self.diag[i] * v[i];
                if i > 0 {
                    s += self.lower[i] * v[i - 1];
                }
                if i + 1 < n {
                    s += self.upper[i] * v[i + 1];
                }
                s
            })
            .collect()
    }

    /// `I + s * self`.
    pub fn identity_plus(&self, s: f64) -> Tridiagonal {
        Tridiagonal {
            lower: self.lower.iter().map(|v| s * v).collect(),
            diag: self.diag.iter().map(|v| 1.0 + s * v).collect(),
            upper: self.upper.iter().map(|v| s * v).collect(),
        }
    }

    pub fn sub(&self, other: &Tridiagonal) -> Tridiagonal {
        let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect();
        Tridiagonal {
            lower: diff(&self.lower, &other.lower),
            diag: diff(&self.diag, &other.diag),
            upper: diff(&self.upper, &other.upper),
        }
    }

    /// Row-major dense copy.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.n();
        let mut m = vec![vec![0.0; n]; n];
        for i in 0..n {
            m[i][i] = self.diag[i];
            if i > 0 {
                m[i][i - 1] = self.lower[i];
            }
            if i + 1 < n {
                m[i][i + 1] = self.upper[i];
            }
        }
        m
    }

    pub fn max_abs_diag(&self) -> f64 {
        self.diag.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Thomas factorization without pivoting.
    pub fn factor(&self) -> Result<TridiagonalLu> {
        let n = self.n();
        let mut pivot = vec![0.0; n];
        let mut mult = vec![0.0; n];
        pivot[0] = self.diag[0];
        for i in 1..n {
            if pivot[i - 1] == 0.0 || !pivot[i - 1].is_finite() {
                return Err(Error::Singular(format!("zero pivot at row {}", i - 1)));
            }
            mult[i] = self.lower[i] / pivot[i - 1];
            pivot[i] = self.diag[i] - mult[i] * self.upper[i - 1];
        }
        if pivot[n - 1] == 0.0 || !pivot[n - 1].is_finite() {
            return Err(Error::Singular(format!("zero pivot at row {}", n - 1)));
        }
        Ok(TridiagonalLu {
            mult,
            pivot,
            upper: self.upper.clone(),
        })
    }
}

/// LU factors of a tridiagonal matrix.
#[derive(Debug, Clone)]
pub struct TridiagonalLu {
    mult: Vec<f64>,
    pivot: Vec<f64>,
    upper: Vec<f64>,
}

impl TridiagonalLu {
    pub fn n(&self) -> usize {
        self.pivot.len()
    }

    /// For a Z-matrix, positive pivots make it a nonsingular M-matrix.
    pub fn pivots_positive(&self) -> bool {
        self.pivot.iter().all(|&p| p > 0.0)
    }

    /// Overwrites `rhs` with the solution. With Z-matrix factors and
    /// positive pivots, every operation adds nonnegative terms, so a
    /// nonnegative right-hand side yields an exactly nonnegative solution.
    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        let n = self.n();
        for i in 1..n {
            rhs[i] -= self.mult[i] * rhs[i - 1];
        }
        rhs[n - 1] /= self.pivot[n - 1];
        for i in (0..n - 1).rev() {
            rhs[i] = (rhs[i] - self.upper[i] * rhs[i + 1]) / self.pivot[i];
        }
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = rhs.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

/// Assembled spatial operator at one age.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorMatrix {
    pub matrix: Tridiagonal,
    pub age: f64,
    /// True when built without a density (the linear part at u = 0).
    pub is_linear_part: bool,
}

impl OperatorMatrix {
    pub fn n(&self) -> usize {
        self.matrix.n()
    }

    /// Checks the Z-matrix sign pattern row by row.
    pub fn check_sign_pattern(&self) -> Result<()> {
        let m = &self.matrix;
        for i in 0..m.n() {
            let west = if i > 0 { m.lower[i] } else { 0.0 };
            let east = if i + 1 < m.n() { m.upper[i] } else { 0.0 };
            if west > 0.0 || east > 0.0 {
                return Err(Error::SignPattern {
                    row: i,
                    age: self.age,
                    detail: format!("off-diagonal entries ({west}, {east}) must be <= 0"),
                });
            }
        }
        Ok(())
    }

    /// Factors `I + da * M`, requiring an M-matrix.
    pub fn step_factor(&self, da: f64) -> Result<TridiagonalLu> {
        let lu = self.matrix.identity_plus(da).factor()?;
        if !lu.pivots_positive() {
            return Err(Error::Singular(format!(
                "one-step matrix at age {} is not an M-matrix (nonpositive pivot)",
                self.age
            )));
        }
        Ok(lu)
    }
}

/// Assembles the spatial operator at age `a`.
///
/// With `u_slice = None` the density and its gradient are taken as zero;
/// the drift then vanishes and the zero-order term is theta(a).
pub fn assemble(model: &ModelSpec, mesh: &SpatialMesh, a: f64, u_slice: Option<&[f64]>) -> Result<OperatorMatrix> {
    let n = mesh.nx();
    if !(0.0..=model.a_max).contains(&a) {
        return Err(Error::Precondition(format!("age {a} outside [0, {}]", model.a_max)));
    }
    if let Some(u) = u_slice {
        if u.len() != n {
            return Err(Error::Precondition(format!(
                "density slice has length {}, mesh has {n} nodes",
                u.len()
            )));
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("density slice at age {a}")));
        }
    }
    let zeros;
    let u = match u_slice {
        Some(u) => u,
        None => {
            zeros = vec![0.0; n];
            &zeros
        }
    };
    let grad = match (u_slice, model.transport) {
        (Some(u), Transport::Diffusion) => mesh.gradient(u),
        _ => vec![0.0; n],
    };

    let mut m = Tridiagonal::zeros(n);
    for i in 0..n {
        m.diag[i] = model.h(u[i], grad[i]) + model.mu(u[i], a);
    }

    if model.transport == Transport::Diffusion {
        let dx = mesh.dx();
        let dx2 = dx * dx;
        let d_nodes: Vec<f64> = (0..n).map(|i| model.d(a, mesh.x(i))).collect();
        let d_left_bc = model.d(a, 0.0);
        let robin = mesh.right() == RightBoundary::Robin;
        for i in 0..n {
            let d_west = 0.5 * (if i == 0 { d_left_bc } else { d_nodes[i - 1] } + d_nodes[i]);
            if robin && i + 1 == n {
                m.lower[i] -= 2.0 * d_west / dx2;
                m.diag[i] += 2.0 * d_west / dx2 + 2.0 * d_nodes[i] * model.robin / dx;
            } else {
                let d_east_node = if i + 1 < n { d_nodes[i + 1] } else { model.d(a, 1.0) };
                let d_east = 0.5 * (d_nodes[i] + d_east_node);
                m.lower[i] -= d_west / dx2;
                m.upper[i] -= d_east / dx2;
                m.diag[i] += (d_west + d_east) / dx2;
            }

            let g = model.g(u[i], grad[i]);
            if g > 0.0 {
                m.diag[i] += g / dx;
                m.lower[i] -= g / dx;
            } else if g < 0.0 {
                if robin && i + 1 == n {
                    // ghost value w_{n} = w_{n-2} - 2 dx nu0 w_{n-1}
                    m.lower[i] += g / dx;
                    m.diag[i] -= g * (1.0 + 2.0 * dx * model.robin) / dx;
                } else {
                    m.diag[i] -= g / dx;
                    m.upper[i] += g / dx;
                }
            }
        }
        m.lower[0] = 0.0;
        m.upper[n - 1] = 0.0;
    }

    if m.diag.iter().chain(&m.lower).chain(&m.upper).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("coefficient evaluation at age {a}")));
    }
    let op = OperatorMatrix {
        matrix: m,
        age: a,
        is_linear_part: u_slice.is_none(),
    };
    op.check_sign_pattern()?;
    Ok(op)
}

/// Smallest-magnitude eigenvalue by inverse power iteration (shift 0).
pub fn smallest_eigenvalue(op: &OperatorMatrix) -> Result<f64> {
    const MAX_ITER: usize = 10_000;
    const TOL: f64 = 1e-14;
    let lu = op.matrix.factor()?;
    let n = op.n();
    let mut x = vec![1.0 / (n as f64).sqrt(); n];
    let mut lambda = f64::NAN;
    for _ in 0..MAX_ITER {
        let y = lu.solve(&x);
        let xy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let new_lambda = 1.0 / xy;
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        x = y.iter().map(|v| v / norm).collect();
        if (new_lambda - lambda).abs() <= TOL * new_lambda.abs() {
            return Ok(new_lambda);
        }
        lambda = new_lambda;
    }
    Err(Error::NonConvergence {
        method: "inverse power iteration",
        iterations: MAX_ITER,
        residual: lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_model;
    use proptest::prelude::*;

    fn model(d: &str, g: &str, h: &str, mu: &str, extra: &str) -> ModelSpec {
        parse_model(&format!(
            "[domain]\na_max = 1\n[coefficients]\nD = \"{d}\"\ng = \"{g}\"\nh = \"{h}\"\nmu = \"{mu}\"\nb = \"1\"\n{extra}"
        ))
        .unwrap()
    }

    const DIRICHLET: &str = "[boundary]\nright = \"dirichlet\"\n";

    #[test]
    fn mesh_geometry() {
        let m = SpatialMesh::new(4, RightBoundary::Robin).unwrap();
        assert_eq!(m.dx(), 0.25);
        assert_eq!(m.nodes(), vec![0.25, 0.5, 0.75, 1.0]);
        assert!((m.dx() * m.nx() as f64 - 1.0).abs() < 1e-15);
        let d = SpatialMesh::new(3, RightBoundary::Dirichlet).unwrap();
        assert_eq!(d.nodes(), vec![0.25, 0.5, 0.75]);
        assert!(SpatialMesh::new(2, RightBoundary::Robin).is_err());
    }

    #[test]
    fn laplacian_stencil() {
        let m = model("1", "0", "0", "0.000001", "");
        let mesh = SpatialMesh::new(3, RightBoundary::Robin).unwrap();
        let op = assemble(&m, &mesh, 0.0, None).unwrap();
        let t = &op.matrix;
        // interior row: (-1, 2, -1) / dx^2 with dx = 1/3
        assert!((t.lower[1] + 9.0).abs() < 1e-12);
        assert!((t.diag[1] - 18.0 - 1e-6).abs() < 1e-12);
        assert!((t.upper[1] + 9.0).abs() < 1e-12);
        assert!(op.is_linear_part);
    }

    #[test]
    fn zero_order_term_adds_to_diagonal() {
        let mesh = SpatialMesh::new(6, RightBoundary::Robin).unwrap();
        let base = assemble(&model("1", "0", "0", "1", ""), &mesh, 0.3, None).unwrap();
        let plus = assemble(&model("1", "0", "0", "6", ""), &mesh, 0.3, None).unwrap();
        for i in 0..6 {
            assert!((plus.matrix.diag[i] - base.matrix.diag[i] - 5.0).abs() < 1e-12);
            assert_eq!(plus.matrix.lower[i], base.matrix.lower[i]);
            assert_eq!(plus.matrix.upper[i], base.matrix.upper[i]);
        }
    }

    fn assert_z_pattern(t: &Tridiagonal) {
        for i in 0..t.n() {
            if i > 0 {
                assert!(t.lower[i] <= 0.0, "row {i} west {}", t.lower[i]);
            }
            if i + 1 < t.n() {
                assert!(t.upper[i] <= 0.0, "row {i} east {}", t.upper[i]);
            }
        }
    }

    #[test]
    fn upwind_drift_positive_velocity() {
        // g = 2 when u = 1 everywhere (g(0,0) = 0 is kept by g = 2u)
        let m = model("1", "2*u", "0", "1", "");
        let mesh = SpatialMesh::new(8, RightBoundary::Robin).unwrap();
        let u = vec![1.0; 8];
        let with = assemble(&m, &mesh, 0.0, Some(&u)).unwrap();
        let without = assemble(&model("1", "0", "0", "1", ""), &mesh, 0.0, Some(&u)).unwrap();
        let dx = mesh.dx();
        for i in 1..8 {
            assert!((with.matrix.lower[i] - without.matrix.lower[i] + 2.0 / dx).abs() < 1e-9);
            assert!((with.matrix.diag[i] - without.matrix.diag[i] - 2.0 / dx).abs() < 1e-9);
        }
        assert_z_pattern(&with.matrix);
    }

    #[test]
    fn upwind_drift_negative_velocity_keeps_pattern() {
        for bc in ["", DIRICHLET, "[boundary]\nnu0 = 3.0\n"] {
            let m = model("0.01", "-5*u*(1+p^2)", "0", "1", bc);
            let mesh = SpatialMesh::for_model(&m).unwrap();
            let u: Vec<f64> = mesh.nodes().iter().map(|x| 1.0 + x).collect();
            let op = assemble(&m, &mesh, 0.5, Some(&u)).unwrap();
            assert_z_pattern(&op.matrix);
        }
    }

    #[test]
    fn zero_slice_equals_absent_slice() {
        let m = model("1 + a*x", "u*p", "u^2 + 0.1", "1 + u", "[boundary]\nnu0 = 0.7\n");
        let mesh = SpatialMesh::new(10, RightBoundary::Robin).unwrap();
        let zero = vec![0.0; 10];
        for a in [0.0, 0.4, 1.0] {
            let absent = assemble(&m, &mesh, a, None).unwrap();
            let explicit = assemble(&m, &mesh, a, Some(&zero)).unwrap();
            assert_eq!(absent.matrix, explicit.matrix);
        }
    }

    #[test]
    fn pure_decay_is_diagonal() {
        let mut m = model("1", "u", "0", "1 + u", "");
        m.transport = Transport::None;
        let mesh = SpatialMesh::new(5, RightBoundary::Robin).unwrap();
        let op = assemble(&m, &mesh, 0.0, Some(&[1.0, 2.0, 3.0, 4.0, 5.0])).unwrap();
        assert_eq!(op.matrix.diag, vec![2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(op.matrix.lower.iter().chain(&op.matrix.upper).all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_and_bad_inputs() {
        let m = model("1", "0", "1/(u - 3)", "1", "");
        let mesh = SpatialMesh::new(4, RightBoundary::Robin).unwrap();
        assert!(matches!(
            assemble(&m, &mesh, 0.0, Some(&[3.0, 1.0, 1.0, 1.0])),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(assemble(&m, &mesh, 2.0, None), Err(Error::Precondition(_))));
        assert!(assemble(&m, &mesh, 0.0, Some(&[1.0, 1.0])).is_err());
    }

    #[test]
    fn sign_violation_is_reported() {
        let op = OperatorMatrix {
            matrix: Tridiagonal {
                lower: vec![0.0, 1.0, -1.0],
                diag: vec![2.0, 2.0, 2.0],
                upper: vec![-1.0, -1.0, 0.0],
            },
            age: 0.25,
            is_linear_part: false,
        };
        assert!(matches!(
            op.check_sign_pattern(),
            Err(Error::SignPattern { row: 1, .. })
        ));
    }

    #[test]
    fn smallest_eigenvalue_identity() {
        let op = OperatorMatrix {
            matrix: Tridiagonal::identity(5),
            age: 0.0,
            is_linear_part: true,
        };
        assert!((smallest_eigenvalue(&op).unwrap() - 1.0).abs() < 1e-14);
    }

    fn laplacian_error(nx: usize, bc: &str, exact: f64) -> f64 {
        // mu is tiny and constant, subtract it exactly
        let m = model("1", "0", "0", "1e-9", bc);
        let mesh = SpatialMesh::new(nx, m.right_boundary).unwrap();
        let op = assemble(&m, &mesh, 0.0, None).unwrap();
        (smallest_eigenvalue(&op).unwrap() - 1e-9 - exact).abs()
    }

    #[test]
    fn dirichlet_dirichlet_eigenvalue_converges_second_order() {
        let exact = std::f64::consts::PI.powi(2);
        let e1 = laplacian_error(39, DIRICHLET, exact);
        let e2 = laplacian_error(79, DIRICHLET, exact);
        assert!(e1 < 1e-2, "error {e1}");
        let order = (e1 / e2).log2();
        assert!(order >= 1.8, "observed order {order}");
    }

    #[test]
    fn dirichlet_neumann_eigenvalue_converges_second_order() {
        let exact = (std::f64::consts::PI / 2.0).powi(2);
        let e1 = laplacian_error(40, "", exact);
        let e2 = laplacian_error(80, "", exact);
        assert!(e1 < 1e-3, "error {e1}");
        let order = (e1 / e2).log2();
        assert!(order >= 1.8, "observed order {order}");
    }

    #[test]
    fn thomas_solve_matches_dense() {
        let t = Tridiagonal {
            lower: vec![0.0, -1.0, -0.5, -2.0],
            diag: vec![4.0, 3.0, 5.0, 6.0],
            upper: vec![-1.0, -0.3, -1.0, 0.0],
        };
        let b = vec![1.0, 2.0, 3.0, 4.0];
        let x = t.factor().unwrap().solve(&b);
        let back = t.mul_vec(&x);
        for (l, r) in back.iter().zip(&b) {
            assert!((l - r).abs() < 1e-14);
        }
    }

    fn arb_model() -> impl Strategy<Value = ModelSpec> {
        (
            0.01f64..2.0,
            -3.0f64..3.0,
            0.0f64..2.0,
            0.1f64..3.0,
            0.0f64..2.0,
            any::<bool>(),
        )
            .prop_map(|(d, g, h, mu, nu0, dirichlet)| {
                let bc = if dirichlet {
                    DIRICHLET.to_string()
                } else {
                    format!("[boundary]\nnu0 = {nu0}\n")
                };
                model(
                    &format!("{d} * (1 + 0.5*x*a)"),
                    &format!("{g} * u * (1 + p)"),
                    &format!("{h} * u^2"),
                    &format!("{mu} + u"),
                    &bc,
                )
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn implicit_step_preserves_positivity(
            m in arb_model(),
            nx in 3usize..30,
            da in 1e-4f64..0.5,
            seedvec in prop::collection::vec(0.0f64..1.0, 30),
            uvec in prop::collection::vec(0.0f64..3.0, 30),
        ) {
            let mesh = SpatialMesh::new(nx, m.right_boundary).unwrap();
            let op = assemble(&m, &mesh, 0.5, Some(&uvec[..nx])).unwrap();
            let lu = op.step_factor(da).unwrap();
            let x = lu.solve(&seedvec[..nx]);
            prop_assert!(x.iter().all(|&v| v >= 0.0));
        }
    }
}
