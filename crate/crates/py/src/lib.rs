//! Python bindings: models are passed as TOML text, results come back as
//! plain floats, lists and dicts.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use agespace::continuation::{trace_branch, ContinuationSettings};
use agespace::discretize::SpatialMesh;
use agespace::fixedpoint::{fixed_point_radius, multistart, DEFAULT_DAMPING, DEFAULT_STARTS};
use agespace::reproduction::{assemble_q0, normalize};
use agespace::{AgeGrid, Error, ModelSpec};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Syntax { .. } | Error::Precondition(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn load(model: &str, nx: Option<usize>, na: Option<usize>) -> PyResult<(ModelSpec, SpatialMesh, AgeGrid)> {
    let mut m = agespace::parse_model(model).map_err(to_py)?;
    if nx.is_some() || na.is_some() {
        m = m.with_grid(nx.unwrap_or(m.nx), na.unwrap_or(m.na));
    }
    let mesh = SpatialMesh::for_model(&m).map_err(to_py)?;
    let grid = AgeGrid::for_model(&m).map_err(to_py)?;
    Ok((m, mesh, grid))
}

/// Spectral radius of the linearized next-generation matrix.
#[pyfunction]
#[pyo3(signature = (model, nx=None, na=None))]
fn spectral_radius(model: &str, nx: Option<usize>, na: Option<usize>) -> PyResult<f64> {
    let (m, mesh, grid) = load(model, nx, na)?;
    assemble_q0(&m, &mesh, &grid).and_then(|q| q.radius()).map_err(to_py)
}

/// Returns `(r_before, cb, normalized_model_text)`.
#[pyfunction]
#[pyo3(signature = (model, nx=None, na=None))]
fn normalize_model(model: &str, nx: Option<usize>, na: Option<usize>) -> PyResult<(f64, f64, String)> {
    let (m, mesh, grid) = load(model, nx, na)?;
    let (norm, r) = normalize(&m, &mesh, &grid).map_err(to_py)?;
    Ok((r, norm.birth_scale, norm.to_config()))
}

/// Traces the positive branch; the model is normalized first.
#[pyfunction]
#[pyo3(signature = (model, nx=None, na=None, eps0=1e-2, step=0.05, max_points=20, n_cap=10.0, norm_cap=1e3))]
#[allow(clippy::too_many_arguments)]
fn trace<'py>(
    py: Python<'py>,
    model: &str,
    nx: Option<usize>,
    na: Option<usize>,
    eps0: f64,
    step: f64,
    max_points: usize,
    n_cap: f64,
    norm_cap: f64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let (m, mesh, grid) = load(model, nx, na)?;
    let (norm, _) = normalize(&m, &mesh, &grid).map_err(to_py)?;
    let settings = ContinuationSettings {
        eps0,
        step,
        max_points,
        n_cap,
        norm_cap,
        ..ContinuationSettings::default()
    };
    let branch = py
        .detach(|| trace_branch(&norm, &mesh, &grid, settings))
        .map_err(to_py)?;
    branch
        .points
        .iter()
        .map(|p| {
            let d = PyDict::new(py);
            d.set_item("n", p.n)?;
            d.set_item("eps", p.eps)?;
            d.set_item("r_qu", p.r_qu)?;
            d.set_item("identity_residual", p.identity_residual)?;
            d.set_item("bifurcation_residual", p.bifurcation_residual)?;
            d.set_item("min_u", p.min_u)?;
            d.set_item("trivial", p.trivial)?;
            d.set_item("b", p.b.clone())?;
            Ok(d)
        })
        .collect()
}

/// Solves `B = Q(u_B) B` from seeded random starts. Returns a dict with
/// `b`, `r`, `iterations` and `residual`, or `None` if every start
/// collapsed.
#[pyfunction]
#[pyo3(signature = (model, seed=42, tol=1e-11, max_iter=100_000))]
fn fixedpoint<'py>(
    py: Python<'py>,
    model: &str,
    seed: u64,
    tol: f64,
    max_iter: usize,
) -> PyResult<Option<Bound<'py, PyDict>>> {
    let (m, mesh, grid) = load(model, None, None)?;
    let outcomes = py.detach(|| {
        multistart(
            &m,
            &mesh,
            &grid,
            DEFAULT_STARTS,
            1.0,
            DEFAULT_DAMPING,
            tol,
            max_iter,
            seed,
        )
    });
    for out in outcomes {
        if let Some(fp) = out.map_err(to_py)?.converged() {
            let r = fixed_point_radius(&m, &mesh, &grid, fp).map_err(to_py)?;
            let d = PyDict::new(py);
            d.set_item("b", fp.b.clone())?;
            d.set_item("r", r)?;
            d.set_item("iterations", fp.iterations)?;
            d.set_item("residual", fp.residual)?;
            return Ok(Some(d));
        }
    }
    Ok(None)
}

/// Equilibria of age- and space-structured population models.
#[pymodule(name = "agespace")]
mod agespace_module {
    #[pymodule_export]
    use super::{fixedpoint, normalize_model, spectral_radius, trace};
}
