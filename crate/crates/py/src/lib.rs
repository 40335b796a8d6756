//! Python bindings: scheme coefficients and blends, the G-stability identity,
//! the LTE estimator pieces and step controller, the Lindberg time factors,
//! a generic IVP integrator driven by a Python right-hand side, and a small
//! Taylor-Green ensemble demo exercising the shared-factorization solver.

use pyo3::exceptions::{PyOverflowError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dln_ensemble::adaptivity::{self, AdaptiveConfig};
use dln_ensemble::dln;
use dln_ensemble::ensemble::StepPath;
use dln_ensemble::experiments::{
    constant_run, lindberg_time_factor as lindberg, ManufacturedSolution, PerturbationSet,
    TimeFactor,
};
use dln_ensemble::fem::build_spaces;
use dln_ensemble::ode;
use dln_ensemble::{StepPair, Theta};

fn theta_of(value: f64) -> PyResult<Theta> {
    Theta::new(value).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn steps_of(k_n: f64, k_nm1: f64) -> PyResult<StepPair> {
    StepPair::new(k_n, k_nm1).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Per-step scheme numbers for one `(theta, k_n, k_nm1)` triple.
#[pyclass(name = "DlnCoefficients", skip_from_py_object)]
#[derive(Clone)]
struct PyDlnCoefficients {
    inner: dln::DlnCoefficients,
}

#[pymethods]
impl PyDlnCoefficients {
    /// Coefficient triples indexed by level offset `[l0, l1, l2]`.
    #[getter]
    fn alpha(&self) -> [f64; 3] {
        self.inner.alpha
    }

    #[getter]
    fn beta(&self) -> [f64; 3] {
        self.inner.beta
    }

    #[getter]
    fn gamma(&self) -> [f64; 3] {
        self.inner.gamma
    }

    #[getter]
    fn eps(&self) -> f64 {
        self.inner.eps
    }

    #[getter]
    fn khat(&self) -> f64 {
        self.inner.khat
    }

    /// Star-blend weights `[w_nm1, w_n]`.
    #[getter]
    fn star(&self) -> [f64; 2] {
        self.inner.star
    }

    /// Backward-Euler step length of the refactorized form.
    #[getter]
    fn k_be(&self) -> f64 {
        self.inner.k_be()
    }

    /// Beta-weighted time point of `[t_nm1, t_n, t_np1]`.
    fn t_beta(&self, t: [f64; 3]) -> PyResult<f64> {
        dln::t_beta(t, &self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!(
            "DlnCoefficients(theta={}, eps={:.6}, khat={:.6e})",
            self.inner.theta, self.inner.eps, self.inner.khat
        )
    }
}

/// Closed-form DLN coefficient table.
#[pyfunction]
fn coefficients(theta: f64, k_n: f64, k_nm1: f64) -> PyResult<PyDlnCoefficients> {
    Ok(PyDlnCoefficients {
        inner: dln::coefficients(theta_of(theta)?, steps_of(k_n, k_nm1)?),
    })
}

/// `(1+theta)/4 |u|^2 + (1-theta)/4 |v|^2`.
#[pyfunction]
fn g_norm_sq(u: Vec<f64>, v: Vec<f64>, theta: f64) -> PyResult<f64> {
    dln::g_norm_sq(&u, &v, theta_of(theta)?).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// `(residual, scale)` of the G-stability identity for one level triple.
#[pyfunction]
fn g_identity_residual(
    y_nm1: Vec<f64>,
    y_n: Vec<f64>,
    y_np1: Vec<f64>,
    theta: f64,
    k_n: f64,
    k_nm1: f64,
) -> PyResult<(f64, f64)> {
    if y_nm1.len() != y_n.len() || y_n.len() != y_np1.len() {
        return Err(PyValueError::new_err("levels must share dimension"));
    }
    let th = theta_of(theta)?;
    let sp = steps_of(k_n, k_nm1)?;
    let y = [y_nm1.as_slice(), y_n.as_slice(), y_np1.as_slice()];
    Ok((
        dln::g_identity_residual(y, th, sp),
        dln::g_identity_scale(y, th, sp),
    ))
}

fn blend(
    y: [&[f64]; 3],
    theta: f64,
    k_n: f64,
    k_nm1: f64,
    which: u8,
) -> PyResult<Vec<f64>> {
    let c = dln::coefficients(theta_of(theta)?, steps_of(k_n, k_nm1)?);
    let res = match which {
        0 => dln::blend_alpha(y, &c),
        1 => dln::blend_beta(y, &c),
        _ => dln::blend_gamma(y, &c),
    };
    res.map_err(|e| PyValueError::new_err(e.to_string()))
}

/// `sum_l alpha[l] y_{n-1+l}`.
#[pyfunction]
fn blend_alpha(
    y_nm1: Vec<f64>,
    y_n: Vec<f64>,
    y_np1: Vec<f64>,
    theta: f64,
    k_n: f64,
    k_nm1: f64,
) -> PyResult<Vec<f64>> {
    blend([&y_nm1, &y_n, &y_np1], theta, k_n, k_nm1, 0)
}

/// `sum_l beta[l] y_{n-1+l}`.
#[pyfunction]
fn blend_beta(
    y_nm1: Vec<f64>,
    y_n: Vec<f64>,
    y_np1: Vec<f64>,
    theta: f64,
    k_n: f64,
    k_nm1: f64,
) -> PyResult<Vec<f64>> {
    blend([&y_nm1, &y_n, &y_np1], theta, k_n, k_nm1, 1)
}

/// Explicit star blend of the two known levels.
#[pyfunction]
fn blend_star(
    y_nm1: Vec<f64>,
    y_n: Vec<f64>,
    theta: f64,
    k_n: f64,
    k_nm1: f64,
) -> PyResult<Vec<f64>> {
    let c = dln::coefficients(theta_of(theta)?, steps_of(k_n, k_nm1)?);
    dln::blend_star([&y_nm1, &y_n], &c).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Leading-error coefficients `(G, R)` of the LTE estimator for the step
/// history `(k_n, k_nm1, k_nm2, k_nm3)`.
#[pyfunction]
fn lte_coefficients(
    theta: f64,
    k_n: f64,
    k_nm1: f64,
    k_nm2: f64,
    k_nm3: f64,
) -> PyResult<(f64, f64)> {
    let th = theta_of(theta)?;
    let c_n = dln::coefficients(th, steps_of(k_n, k_nm1)?);
    let c_nm1 = dln::coefficients(th, steps_of(k_nm1, k_nm2)?);
    let c_nm2 = dln::coefficients(th, steps_of(k_nm2, k_nm3)?);
    let g = adaptivity::g_coefficient(&c_n, k_n / k_nm1)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let r = adaptivity::r_coefficient(
        &c_nm1,
        &c_nm2,
        [k_n / k_nm1, k_nm1 / k_nm2, k_nm2 / k_nm3],
    )
    .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((g, r))
}

/// Controller factor `min(1.5, max(0.2, kappa (tol/estimate)^(1/3)))`.
#[pyfunction]
fn controller_factor(estimate: f64, tol: f64, kappa: f64) -> PyResult<f64> {
    let cfg = AdaptiveConfig::new(tol, kappa, 1e-300, 1e300)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(adaptivity::controller_factor(estimate, &cfg))
}

/// Next step size, clamped to `[k_min, k_max]`.
#[pyfunction]
fn next_step(
    k_n: f64,
    estimate: f64,
    tol: f64,
    kappa: f64,
    k_min: f64,
    k_max: f64,
) -> PyResult<f64> {
    let cfg = AdaptiveConfig::new(tol, kappa, k_min, k_max)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(adaptivity::next_step(k_n, estimate, &cfg))
}

/// Lindberg stiff-system component `G_1` or `G_2`.
#[pyfunction]
fn lindberg_time_factor(which: u8, omega: f64, t: f64) -> PyResult<f64> {
    lindberg(which, omega, t).map_err(|e| match e {
        dln_ensemble::experiments::ManufacturedError::Overflow { .. } => {
            PyOverflowError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    })
}

/// Variable-step DLN integration of `y' = rhs(t, y)` with a Python callback.
///
/// `steps` are the step sizes after the supplied first interval `k0`;
/// returns the trajectory as `[(t, [y...]), ...]` including both initial
/// levels.
#[pyfunction]
#[pyo3(signature = (rhs, t0, y0, k0, y1, steps, theta, tolerance = 1e-12))]
#[allow(clippy::too_many_arguments)]
fn integrate_ivp(
    py: Python<'_>,
    rhs: Py<PyAny>,
    t0: f64,
    y0: Vec<f64>,
    k0: f64,
    y1: Vec<f64>,
    steps: Vec<f64>,
    theta: f64,
    tolerance: f64,
) -> PyResult<Vec<(f64, Vec<f64>)>> {
    if y0.len() != y1.len() {
        return Err(PyValueError::new_err("y0 and y1 must share dimension"));
    }
    let dim = y0.len();
    let callback_error = std::cell::RefCell::new(None::<PyErr>);
    let problem = ode::IvpProblem::new(dim, |t, y, out| {
        let call = || -> PyResult<Vec<f64>> {
            rhs.bind(py).call1((t, y.to_vec()))?.extract::<Vec<f64>>()
        };
        match call() {
            Ok(v) if v.len() == dim => out.copy_from_slice(&v),
            Ok(v) => {
                *callback_error.borrow_mut() = Some(PyValueError::new_err(format!(
                    "rhs returned {} values, expected {dim}",
                    v.len()
                )));
                out.fill(0.0);
            }
            Err(e) => {
                *callback_error.borrow_mut() = Some(e);
                out.fill(0.0);
            }
        }
    });
    let opts = ode::NonlinearSolveOptions {
        tolerance,
        ..Default::default()
    };
    let traj = ode::integrate(&problem, t0, &y0, k0, &y1, &steps, theta_of(theta)?, &opts);
    drop(problem);
    if let Some(e) = callback_error.into_inner() {
        return Err(e);
    }
    traj.map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Constant-step Taylor-Green ensemble run on an `m x m` mesh; returns run
/// counters, error norms and the final kinetic energies as a dict.
#[pyfunction]
#[pyo3(signature = (m, j, theta, re, omega, n_steps, delta_bar = 1e-2, seed = 1, direct = false))]
#[allow(clippy::too_many_arguments)]
fn taylor_green_run<'py>(
    py: Python<'py>,
    m: usize,
    j: usize,
    theta: f64,
    re: f64,
    omega: f64,
    n_steps: u64,
    delta_bar: f64,
    seed: u64,
    direct: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let spaces = build_spaces(m).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let k = 0.5 * spaces.mesh.h();
    let deltas = PerturbationSet::draw(j, delta_bar, seed);
    let sol = ManufacturedSolution::new(TimeFactor::SinOmega { omega }, 1.0 / re, deltas.values);
    let path = if direct {
        StepPath::Direct
    } else {
        StepPath::Refactorized
    };
    let outcome = constant_run(&spaces, &sol, theta_of(theta)?, path, 0.0, k, n_steps, true)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;

    let avg = outcome.errors.average();
    let out = PyDict::new(py);
    out.set_item("steps", outcome.steps_taken)?;
    out.set_item("factorizations", outcome.factorizations)?;
    out.set_item("solves", outcome.solves)?;
    out.set_item("completed", outcome.completed)?;
    out.set_item("k", k)?;
    out.set_item("avg_velocity_inf_l2", avg.velocity_inf_l2)?;
    out.set_item("avg_velocity_inf_h1", avg.velocity_inf_h1)?;
    out.set_item("avg_pressure_l2", avg.pressure_l2)?;
    if let Some(last) = outcome.trace.last() {
        out.set_item("final_t", last.t)?;
        out.set_item("final_energy_avg", last.energy_avg)?;
        out.set_item("final_energy_max", last.energy_max)?;
    }
    Ok(out)
}

#[pymodule]
fn dln_ensemble_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyDlnCoefficients>()?;
    m.add_function(wrap_pyfunction!(coefficients, m)?)?;
    m.add_function(wrap_pyfunction!(g_norm_sq, m)?)?;
    m.add_function(wrap_pyfunction!(g_identity_residual, m)?)?;
    m.add_function(wrap_pyfunction!(blend_alpha, m)?)?;
    m.add_function(wrap_pyfunction!(blend_beta, m)?)?;
    m.add_function(wrap_pyfunction!(blend_star, m)?)?;
    m.add_function(wrap_pyfunction!(lte_coefficients, m)?)?;
    m.add_function(wrap_pyfunction!(controller_factor, m)?)?;
    m.add_function(wrap_pyfunction!(next_step, m)?)?;
    m.add_function(wrap_pyfunction!(lindberg_time_factor, m)?)?;
    m.add_function(wrap_pyfunction!(integrate_ivp, m)?)?;
    m.add_function(wrap_pyfunction!(taylor_green_run, m)?)?;
    Ok(())
}
