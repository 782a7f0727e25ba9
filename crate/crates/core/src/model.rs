//! Problem definition: coefficients, boundary data and age horizon.
//!
//! Models are read from a TOML document with four tables:
//!
//! ```toml
//! [domain]
//! a_max = 1.0            # maximal age, required, finite and positive
//! nx = 50                # spatial unknowns (default 50)
//! na = 100               # age steps (default 100)
//! transport = "diffusion" # or "none": drop diffusion and drift (pure decay)
//!
//! [coefficients]         # expression strings (or plain numbers)
//! D = "1"                # diffusion D(a, x) > 0
//! g = "0"                # drift g(u, p), g(0, 0) = 0
//! h = "0"                # absorption h(u, p)
//! mu = "1 + u"           # death mu(u, a) >= 0
//! b = "exp(-u)"          # birth b(u) > 0
//!
//! [boundary]
//! nu0 = 0.0              # Robin coefficient at x = 1 (default 0)
//! right = "robin"        # or "dirichlet"
//!
//! [normalization]
//! cb = 1.0               # birth scale c_b > 0 (default 1)
//! ```
//!
//! The left end x = 0 is always Dirichlet. Unknown tables or keys are
//! rejected. The expression grammar is documented in [`crate::expr`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{self, Expr, Point, Var};

/// A parsed coefficient together with its source text and allowed variables.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientExpr {
    expr: Expr,
    depends_on_u: bool,
}

impl CoefficientExpr {
    /// Parses `src`, rejecting variables outside `allowed`.
    pub fn parse(src: &str, name: &str, allowed: &[Var]) -> Result<Self> {
        let expr = expr::parse(src).map_err(|e| match e {
            Error::Syntax { line, column, message } => Error::Syntax {
                line,
                column,
                message: format!("in coefficient {name}: {message}"),
            },
            e => e,
        })?;
        for var in Var::ALL {
            if expr.depends_on(var) && !allowed.contains(&var) {
                return Err(Error::Invariant(format!("{name} may not depend on '{}'", var.symbol())));
            }
        }
        Ok(Self::from_expr(expr))
    }

    pub fn from_expr(expr: Expr) -> Self {
        let depends_on_u = expr.depends_on(Var::U) || expr.depends_on(Var::P);
        Self { expr, depends_on_u }
    }

    pub fn constant(v: f64) -> Self {
        Self::from_expr(Expr::Num(v))
    }

    #[inline]
    pub fn eval(&self, pt: &Point) -> f64 {
        self.expr.eval(pt)
    }

    /// True when the expression involves the density or its gradient, i.e.
    /// when its nonlinear part does not vanish identically.
    pub fn depends_on_u(&self) -> bool {
        self.depends_on_u
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }
}

impl fmt::Display for CoefficientExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.expr)
    }
}

/// Boundary condition at x = 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RightBoundary {
    /// `w'(1) + nu0 w(1) = 0`.
    #[default]
    Robin,
    /// `w(1) = 0`.
    Dirichlet,
}

/// Whether individuals move in space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    /// Full operator: diffusion, drift, absorption and death.
    #[default]
    Diffusion,
    /// No spatial movement: only the zero-order terms h(u, 0) + mu(u, a)
    /// remain and every node evolves independently.
    None,
}

/// The continuous problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub diffusion: CoefficientExpr,
    pub drift: CoefficientExpr,
    pub absorption: CoefficientExpr,
    pub death: CoefficientExpr,
    pub birth: CoefficientExpr,
    /// Birth scale c_b; normalization rescales this, never the expression.
    pub birth_scale: f64,
    /// Robin coefficient nu0.
    pub robin: f64,
    pub right_boundary: RightBoundary,
    pub transport: Transport,
    pub a_max: f64,
    /// Default number of spatial unknowns.
    pub nx: usize,
    /// Default number of age steps.
    pub na: usize,
}

pub const DEFAULT_NX: usize = 50;
pub const DEFAULT_NA: usize = 100;

const SAMPLES: usize = 33;
const U_SAMPLES: [f64; 9] = [0.0, 0.01, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 50.0];
const P_SAMPLES: [f64; 5] = [-10.0, -1.0, 0.0, 1.0, 10.0];

impl ModelSpec {
    /// Death at density u and age a.
    #[inline]
    pub fn mu(&self, u: f64, a: f64) -> f64 {
        self.death.eval(&Point::new(u, 0.0, a, 0.0))
    }

    #[inline]
    pub fn d(&self, a: f64, x: f64) -> f64 {
        self.diffusion.eval(&Point::new(0.0, 0.0, a, x))
    }

    #[inline]
    pub fn g(&self, u: f64, p: f64) -> f64 {
        self.drift.eval(&Point::new(u, p, 0.0, 0.0))
    }

    #[inline]
    pub fn h(&self, u: f64, p: f64) -> f64 {
        self.absorption.eval(&Point::new(u, p, 0.0, 0.0))
    }

    /// Unscaled birth modulus b(u).
    #[inline]
    pub fn b(&self, u: f64) -> f64 {
        self.birth.eval(&Point::new(u, 0.0, 0.0, 0.0))
    }

    /// Scaled birth modulus c_b * b(u).
    #[inline]
    pub fn beta(&self, u: f64) -> f64 {
        self.birth_scale * self.b(u)
    }

    /// Returns a copy with a different birth scale.
    pub fn with_birth_scale(&self, cb: f64) -> Self {
        Self {
            birth_scale: cb,
            ..self.clone()
        }
    }

    /// Returns a copy with different default grid sizes.
    pub fn with_grid(&self, nx: usize, na: usize) -> Self {
        Self { nx, na, ..self.clone() }
    }

    fn sample_ages(&self) -> impl Iterator<Item = f64> + '_ {
        (0..SAMPLES).map(move |i| self.a_max * i as f64 / (SAMPLES - 1) as f64)
    }

    /// Checks every model invariant on a finite sample of arguments.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Invariant(m.to_string()));
        if !(self.a_max.is_finite() && self.a_max > 0.0) {
            return fail("a_max must be finite and positive");
        }
        if !(self.robin.is_finite() && self.robin >= 0.0) {
            return fail("nu0 must be nonnegative");
        }
        if !(self.birth_scale.is_finite() && self.birth_scale > 0.0) {
            return fail("cb must be positive");
        }
        if self.nx < 3 {
            return fail("nx must be at least 3");
        }
        if self.na < 2 {
            return fail("na must be at least 2");
        }
        for a in self.sample_ages() {
            for j in 0..SAMPLES {
                let x = j as f64 / (SAMPLES - 1) as f64;
                let d = self.d(a, x);
                if !(d.is_finite() && d > 0.0) {
                    return fail("D must be positive");
                }
            }
            for u in U_SAMPLES {
                let m = self.mu(u, a);
                if !(m.is_finite() && m >= 0.0) {
                    return fail("mu must be nonnegative");
                }
            }
            let theta = self.mu(0.0, a) + self.h(0.0, 0.0);
            if !(theta.is_finite() && theta > 0.0) {
                return fail("theta(a) = mu(0,a) + h(0,0) must be positive");
            }
        }
        if self.g(0.0, 0.0) != 0.0 {
            return fail("g(0,0) must vanish");
        }
        for u in U_SAMPLES {
            let b = self.b(u);
            if !(b.is_finite() && b > 0.0) {
                return fail("b must be positive");
            }
            for p in P_SAMPLES {
                if !self.g(u, p).is_finite() || !self.h(u, p).is_finite() {
                    return Err(Error::NonFinite(format!("g or h at u={u}, p={p}")));
                }
            }
        }
        Ok(())
    }

    /// theta(a) = mu(0, a) + h(0, 0), the zero-order coefficient of the
    /// linear part.
    pub fn theta(&self, a: f64) -> Result<f64> {
        if !(0.0..=self.a_max).contains(&a) {
            return Err(Error::Precondition(format!("age {a} outside [0, {}]", self.a_max)));
        }
        let theta = self.mu(0.0, a) + self.h(0.0, 0.0);
        if !(theta > 0.0) {
            return Err(Error::Invariant(format!("theta({a}) = {theta} must be positive")));
        }
        Ok(theta)
    }

    pub fn to_config(&self) -> String {
        let doc = ConfigDoc {
            domain: DomainSection {
                a_max: self.a_max,
                nx: Some(self.nx),
                na: Some(self.na),
                transport: Some(self.transport),
            },
            coefficients: CoefficientSection {
                diffusion: ExprValue::Text(self.diffusion.to_string()),
                drift: ExprValue::Text(self.drift.to_string()),
                absorption: ExprValue::Text(self.absorption.to_string()),
                mu: ExprValue::Text(self.death.to_string()),
                b: ExprValue::Text(self.birth.to_string()),
            },
            boundary: Some(BoundarySection {
                nu0: Some(self.robin),
                right: Some(self.right_boundary),
            }),
            normalization: Some(NormalizationSection {
                cb: Some(self.birth_scale),
            }),
        };
        toml::to_string(&doc).expect("model config serializes")
    }
}

/// Evaluates theta(a) for a model; see [`ModelSpec::theta`].
pub fn eval_theta(model: &ModelSpec, a: f64) -> Result<f64> {
    model.theta(a)
}

impl FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_model(s)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigDoc {
    domain: DomainSection,
    coefficients: CoefficientSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    boundary: Option<BoundarySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    normalization: Option<NormalizationSection>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DomainSection {
    a_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nx: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    na: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transport: Option<Transport>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CoefficientSection {
    #[serde(rename = "D")]
    diffusion: ExprValue,
    #[serde(rename = "g")]
    drift: ExprValue,
    #[serde(rename = "h")]
    absorption: ExprValue,
    mu: ExprValue,
    b: ExprValue,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundarySection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nu0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    right: Option<RightBoundary>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NormalizationSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cb: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum ExprValue {
    Text(String),
    Number(f64),
}

impl ExprValue {
    fn to_coefficient(&self, name: &str, allowed: &[Var]) -> Result<CoefficientExpr> {
        match self {
            ExprValue::Text(s) => CoefficientExpr::parse(s, name, allowed),
            ExprValue::Number(v) => Ok(CoefficientExpr::constant(*v)),
        }
    }
}

/// Parses and validates a model configuration.
pub fn parse_model(config_text: &str) -> Result<ModelSpec> {
    let doc: ConfigDoc = toml::from_str(config_text).map_err(|e| {
        let offset = e.span().map_or(0, |s| s.start);
        Error::syntax_at(config_text, offset, e.message().to_string())
    })?;
    let c = &doc.coefficients;
    let boundary = doc.boundary.as_ref();
    let model = ModelSpec {
        diffusion: c.diffusion.to_coefficient("D", &[Var::A, Var::X])?,
        drift: c.drift.to_coefficient("g", &[Var::U, Var::P])?,
        absorption: c.absorption.to_coefficient("h", &[Var::U, Var::P])?,
        death: c.mu.to_coefficient("mu", &[Var::U, Var::A])?,
        birth: c.b.to_coefficient("b", &[Var::U])?,
        birth_scale: doc.normalization.as_ref().and_then(|n| n.cb).unwrap_or(1.0),
        robin: boundary.and_then(|b| b.nu0).unwrap_or(0.0),
        right_boundary: boundary.and_then(|b| b.right).unwrap_or_default(),
        transport: doc.domain.transport.unwrap_or_default(),
        a_max: doc.domain.a_max,
        nx: doc.domain.nx.unwrap_or(DEFAULT_NX),
        na: doc.domain.na.unwrap_or(DEFAULT_NA),
    };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(d: &str, g: &str, h: &str, mu: &str, b: &str, a_max: f64) -> String {
        format!(
            "[domain]\na_max = {a_max}\n\n[coefficients]\nD = \"{d}\"\ng = \"{g}\"\nh = \"{h}\"\nmu = \"{mu}\"\nb = \"{b}\"\n"
        )
    }

    #[test]
    fn minimal_config() {
        let m = parse_model(&config("1", "0", "0", "1", "1", 1.0)).unwrap();
        assert_eq!(m.birth_scale, 1.0);
        assert_eq!(m.robin, 0.0);
        assert_eq!(m.right_boundary, RightBoundary::Robin);
        assert_eq!(m.transport, Transport::Diffusion);
        assert_eq!((m.nx, m.na), (DEFAULT_NX, DEFAULT_NA));
        assert!(!m.birth.depends_on_u());
    }

    #[test]
    fn numbers_accepted_for_coefficients() {
        let text = "[domain]\na_max = 1\n[coefficients]\nD = 1\ng = 0\nh = 0\nmu = 1.5\nb = 2\n";
        let m = parse_model(text).unwrap();
        assert_eq!(m.mu(3.0, 0.2), 1.5);
    }

    #[test]
    fn negative_diffusion_rejected() {
        let err = parse_model(&config("-1", "0", "0", "1", "1", 1.0)).unwrap_err();
        assert!(err.to_string().contains("D must be positive"), "{err}");
    }

    #[test]
    fn invariant_violations_are_named() {
        let cases = [
            (config("1", "1 + u", "0", "1", "1", 1.0), "g(0,0)"),
            (config("1", "0", "0", "u - 1", "1", 1.0), "mu must be nonnegative"),
            (config("1", "0", "0", "0", "1", 1.0), "theta"),
            (config("1", "0", "0", "1", "1 - u", 1.0), "b must be positive"),
            (config("1", "0", "0", "1", "1", -2.0), "a_max"),
        ];
        for (text, needle) in cases {
            let err = parse_model(&text).unwrap_err();
            assert!(err.to_string().contains(needle), "{needle}: {err}");
        }
        let text = config("1", "0", "0", "1", "1", 1.0) + "[boundary]\nnu0 = -0.5\n";
        assert!(parse_model(&text).unwrap_err().to_string().contains("nu0"));
    }

    #[test]
    fn variables_restricted_per_coefficient() {
        let err = parse_model(&config("1 + u", "0", "0", "1", "1", 1.0)).unwrap_err();
        assert!(err.to_string().contains("D may not depend on 'u'"), "{err}");
        let err = parse_model(&config("1", "0", "0", "1", "1 + a", 1.0)).unwrap_err();
        assert!(err.to_string().contains("b may not depend on 'a'"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = config("1", "0", "0", "1", "1", 1.0) + "[boundary]\nnu1 = 2\n";
        assert!(matches!(parse_model(&text), Err(Error::Syntax { .. })));
        let text = config("1", "0", "0", "1", "1", 1.0) + "[extra]\nk = 1\n";
        assert!(matches!(parse_model(&text), Err(Error::Syntax { .. })));
    }

    #[test]
    fn syntax_errors_carry_position() {
        match parse_model("[domain]\na_max = = 1\n").unwrap_err() {
            Error::Syntax { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e:?}"),
        }
        let err = parse_model(&config("1", "0", "0", "1 +", "1", 1.0)).unwrap_err();
        assert!(err.to_string().contains("coefficient mu"), "{err}");
    }

    #[test]
    fn u_dependence_flags_match_numeric_dependence() {
        let m = parse_model(&config("1", "u*p", "u^2", "1+u^2", "exp(-u)", 2.0)).unwrap();
        assert_eq!(m.a_max, 2.0);
        // oracle: evaluate each coefficient at two density values
        let differs = |f: &dyn Fn(f64) -> f64| f(0.3) != f(1.7);
        assert!(differs(&|u| m.g(u, 0.5)) && m.drift.depends_on_u());
        assert!(differs(&|u| m.h(u, 0.0)) && m.absorption.depends_on_u());
        assert!(differs(&|u| m.mu(u, 0.5)) && m.death.depends_on_u());
        assert!(differs(&|u| m.b(u)) && m.birth.depends_on_u());
        assert!(!differs(&|_| m.d(0.5, 0.5)) && !m.diffusion.depends_on_u());
    }

    #[test]
    fn theta_values() {
        let m = parse_model(&config("1", "0", "0", "1", "1", 1.0)).unwrap();
        assert_eq!(eval_theta(&m, 0.3).unwrap(), 1.0);
        let m = parse_model(&config("1", "0", "u^2", "1+a", "1", 1.0)).unwrap();
        assert_eq!(eval_theta(&m, 0.5).unwrap(), 1.5);
        let m = parse_model(&config("1", "0", "p^2+0.2", "exp(-a)", "1", 1.0)).unwrap();
        assert!((eval_theta(&m, 0.0).unwrap() - 1.2).abs() < 1e-15);
        assert!(matches!(eval_theta(&m, 1.5), Err(Error::Precondition(_))));
    }

    #[test]
    fn theta_rejects_nonpositive() {
        let mut m = parse_model(&config("1", "0", "0", "1", "1", 1.0)).unwrap();
        m.absorption = CoefficientExpr::constant(-1.0);
        assert!(matches!(eval_theta(&m, 0.0), Err(Error::Invariant(_))));
    }

    #[test]
    fn config_round_trip() {
        let text = config("0.1 + 0.05*a*x", "u*p", "0.2*u^2", "1+u^2", "exp(-u)", 2.0)
            + "[boundary]\nnu0 = 0.5\nright = \"robin\"\n[normalization]\ncb = 1.5820\n";
        let m = parse_model(&text).unwrap();
        let again = parse_model(&m.to_config()).unwrap();
        assert_eq!(m, again);
        let scaled = m.with_birth_scale(1.0 / 3.0);
        assert_eq!(parse_model(&scaled.to_config()).unwrap(), scaled);
    }
}
