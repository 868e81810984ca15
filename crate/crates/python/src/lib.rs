//! Python bindings: the exact Gaussian kernel, the curvature invariants and
//! first-order coefficient of a vector-field pair, Duhamel convolutions and
//! the Monte Carlo density oracle.

use hypoheat::duhamel::{self, ConvResult, MonomialOp};
use hypoheat::geometry::{self, VectorFieldPair};
use hypoheat::oracle::{self, Bandwidth, DensityEstimate, SimConfig};
use hypoheat::{LQOperator, Mat2, Var, Vec2};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn vec2(p: (f64, f64)) -> Vec2 {
    Vec2::new(p.0, p.1)
}

fn rows(m: Mat2) -> [[f64; 2]; 2] {
    [[m.get(0, 0), m.get(0, 1)], [m.get(1, 0), m.get(1, 1)]]
}

fn var(deriv: u8) -> PyResult<Var> {
    match deriv {
        1 => Ok(Var::X1),
        2 => Ok(Var::X2),
        _ => Err(PyValueError::new_err("deriv must be 1 or 2")),
    }
}

/// Linear-quadratic operator `½ ⟨B, ∇⟩² + ⟨Ax, ∇⟩`.
#[pyclass(name = "LQOperator", frozen)]
struct PyLQOperator {
    inner: LQOperator,
}

#[pymethods]
impl PyLQOperator {
    #[new]
    fn new(a: [[f64; 2]; 2], b: (f64, f64)) -> PyResult<Self> {
        let m = Mat2::new(a[0][0], a[0][1], a[1][0], a[1][1]);
        LQOperator::new(m, vec2(b)).map(|inner| PyLQOperator { inner }).map_err(err)
    }

    /// `½ ∂1² + s x1 ∂2`.
    #[staticmethod]
    fn kolmogorov(s: f64) -> PyResult<Self> {
        LQOperator::kolmogorov(s).map(|inner| PyLQOperator { inner }).map_err(err)
    }

    fn kernel(&self, t: f64, x: (f64, f64), y: (f64, f64)) -> PyResult<f64> {
        self.inner.kernel(t, vec2(x), vec2(y)).map_err(err)
    }

    fn gamma(&self, t: f64) -> [[f64; 2]; 2] {
        rows(self.inner.gamma(t))
    }

    fn g(&self, t: f64) -> [[f64; 2]; 2] {
        rows(self.inner.g(t))
    }

    fn exp(&self, t: f64) -> [[f64; 2]; 2] {
        rows(self.inner.exp(t))
    }

    fn diagonal_at_one(&self) -> PyResult<f64> {
        self.inner.diagonal_at_one().map_err(err)
    }

    fn is_nilpotent(&self) -> bool {
        self.inner.is_nilpotent()
    }
}

/// Drift `X0` and diffusion field `X1`, each given by two expressions in
/// `x1`, `x2`.
#[pyclass(name = "VectorFieldPair", frozen)]
struct PyPair {
    inner: VectorFieldPair,
}

#[pymethods]
impl PyPair {
    #[new]
    fn new(x0: (String, String), x1: (String, String)) -> PyResult<Self> {
        VectorFieldPair::parse([&x0.0, &x0.1], [&x1.0, &x1.1])
            .map(|inner| PyPair { inner })
            .map_err(err)
    }

    #[staticmethod]
    fn kolmogorov(s: f64) -> Self {
        PyPair {
            inner: VectorFieldPair::kolmogorov(s),
        }
    }

    /// `det[X1 | [X0, X1]]` as an expression string.
    fn frame_determinant(&self) -> String {
        self.inner.frame_determinant().to_string()
    }

    fn is_chart_form(&self) -> bool {
        self.inner.is_chart_form()
    }

    /// Dict with `parallel`, `hormander`, `frame_det`, `parallel_residual`.
    fn check_hypotheses<'py>(&self, py: Python<'py>, x0: (f64, f64)) -> PyResult<Bound<'py, PyDict>> {
        let h = geometry::check_hypotheses(&self.inner, vec2(x0)).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("parallel", h.parallel)?;
        d.set_item("hormander", h.hormander)?;
        d.set_item("frame_det", h.frame_det)?;
        d.set_item("parallel_residual", h.parallel_residual)?;
        Ok(d)
    }

    /// Dict with `K1`, `K2`, `div`, `beta`, `coefficient`.
    fn invariants<'py>(&self, py: Python<'py>, x0: (f64, f64)) -> PyResult<Bound<'py, PyDict>> {
        let g = geometry::coefficient_geometric(&self.inner, vec2(x0)).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("K1", g.k1)?;
        d.set_item("K2", g.k2)?;
        d.set_item("div", g.div)?;
        d.set_item("beta", g.beta)?;
        d.set_item("coefficient", g.coefficient)?;
        Ok(d)
    }

    fn coefficient_geometric(&self, x0: (f64, f64)) -> PyResult<f64> {
        geometry::coefficient_geometric(&self.inner, vec2(x0))
            .map(|g| g.coefficient)
            .map_err(err)
    }

    /// Coefficient from the Taylor data of the chart drift.
    fn coefficient_coordinate(&self, x0: (f64, f64)) -> PyResult<f64> {
        geometry::coefficient_coordinate(&self.inner, vec2(x0)).map_err(err)
    }

    /// Two-term diagonal approximation `p_μ(t, x0, x0)`.
    fn asymptotic_density(&self, x0: (f64, f64), t: f64) -> PyResult<f64> {
        geometry::full_asymptotics(&self.inner, vec2(x0), t).map_err(err)
    }
}

fn conv_dict<'py>(py: Python<'py>, r: &ConvResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("normalized", r.normalized)?;
    d.set_item("raw", r.raw)?;
    d.set_item("error", r.error)?;
    Ok(d)
}

fn monomial(op: (f64, u32, u32, u8)) -> PyResult<MonomialOp> {
    MonomialOp::new(op.0, op.1, op.2, var(op.3)?).map_err(err)
}

/// `q0(t, x, y)` for `½ ∂1² + s x1 ∂2`.
#[pyfunction]
fn kernel_eval(s: f64, t: f64, x: (f64, f64), y: (f64, f64)) -> PyResult<f64> {
    LQOperator::kolmogorov(s)
        .and_then(|op| op.kernel(t, vec2(x), vec2(y)))
        .map_err(err)
}

/// Single Duhamel convolution of the kernel against `coeff x1^a x2^b ∂_deriv`,
/// with the operator given as a tuple `(coeff, a, b, deriv)`.
#[pyfunction]
fn conv1<'py>(py: Python<'py>, s: f64, op: (f64, u32, u32, u8)) -> PyResult<Bound<'py, PyDict>> {
    let k = LQOperator::kolmogorov(s).map_err(err)?;
    let r = duhamel::conv1(&k, &monomial(op)?).map_err(err)?;
    conv_dict(py, &r)
}

/// Double Duhamel convolution `q0 * lhs q0 * rhs q0`.
#[pyfunction]
fn conv2<'py>(
    py: Python<'py>,
    s: f64,
    lhs: (f64, u32, u32, u8),
    rhs: (f64, u32, u32, u8),
) -> PyResult<Bound<'py, PyDict>> {
    let k = LQOperator::kolmogorov(s).map_err(err)?;
    let r = duhamel::conv2(&k, &monomial(lhs)?, &monomial(rhs)?).map_err(err)?;
    conv_dict(py, &r)
}

/// Euler-Maruyama endpoints, one list of `(x1, x2)` per observation time.
/// Stopped paths are NaN.
#[pyfunction]
#[pyo3(signature = (pair, x0, t_grid, n_paths, dt = 1e-3, seed = 0))]
fn simulate(
    py: Python<'_>,
    pair: &PyPair,
    x0: (f64, f64),
    t_grid: Vec<f64>,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> PyResult<Vec<Vec<(f64, f64)>>> {
    let cfg = SimConfig::new(n_paths, dt, t_grid, seed);
    let pair = pair.inner.clone();
    let ends = py
        .detach(|| oracle::simulate_endpoints(&pair, vec2(x0), &cfg))
        .map_err(err)?;
    Ok(ends
        .points
        .iter()
        .map(|row| row.iter().map(|p| (p.x1(), p.x2())).collect())
        .collect())
}

/// Kernel density estimate at `x0` with respect to the canonical volume.
/// Returns `(value, stderr)`.
#[pyfunction]
#[pyo3(signature = (pair, points, x0, bandwidth = None))]
fn estimate_density(
    pair: &PyPair,
    points: Vec<(f64, f64)>,
    x0: (f64, f64),
    bandwidth: Option<f64>,
) -> PyResult<(f64, f64)> {
    let pts: Vec<Vec2> = points.into_iter().map(vec2).collect();
    let bw = bandwidth.map_or(Bandwidth::Auto, Bandwidth::Fixed);
    oracle::estimate_density(&pts, vec2(x0), &pair.inner, bw)
        .map(|d| (d.value, d.stderr))
        .map_err(err)
}

/// Weighted fit of `r(t) - 1 = c t` to density estimates. Returns
/// `(c, stderr)`.
#[pyfunction]
fn fit_coefficient(times: Vec<f64>, values: Vec<f64>, stderrs: Vec<f64>) -> PyResult<(f64, f64)> {
    if values.len() != stderrs.len() {
        return Err(PyValueError::new_err("values and stderrs differ in length"));
    }
    let est: Vec<DensityEstimate> = values
        .iter()
        .zip(&stderrs)
        .map(|(&value, &stderr)| DensityEstimate {
            value,
            stderr,
            n_effective: 0,
        })
        .collect();
    oracle::fit_coefficient(&times, &est)
        .map(|f| (f.c, f.stderr))
        .map_err(err)
}

#[pymodule]
fn hypoheat_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLQOperator>()?;
    m.add_class::<PyPair>()?;
    m.add_function(wrap_pyfunction!(kernel_eval, m)?)?;
    m.add_function(wrap_pyfunction!(conv1, m)?)?;
    m.add_function(wrap_pyfunction!(conv2, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_density, m)?)?;
    m.add_function(wrap_pyfunction!(fit_coefficient, m)?)?;
    Ok(())
}
