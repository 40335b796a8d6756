//! Variable-step DLN integrator for initial value problems `y' = g(t, y)`.
//!
//! Both realizations of the step are provided: the direct one-leg form and
//! the refactorized pre-filter / backward-Euler-like solve / post-filter
//! form. They are algebraically equivalent; `refactorized_step` exists so the
//! equivalence can be exercised, and because the pre/post filter view is what
//! the ensemble flow solver implements at scale.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::adaptivity::{
    ab2_like_predict, g_coefficient, lte_estimate, r_coefficient, AdaptiveStepper, LteEstimate,
};
use crate::dln::{coefficients, DlnError, StepPair, Theta};

#[derive(Debug, Error)]
pub enum OdeError {
    #[error(transparent)]
    Dln(#[from] DlnError),
    #[error("Newton iteration failed to converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("singular Newton matrix")]
    SingularJacobian,
    #[error("history times must be strictly increasing")]
    BadHistory,
}

/// Right-hand side `g(t, y)` with an optional analytic Jacobian.
pub struct IvpProblem<'a> {
    pub dim: usize,
    pub rhs: Box<dyn Fn(f64, &[f64], &mut [f64]) + 'a>,
    pub jacobian: Option<Box<dyn Fn(f64, &[f64]) -> DMatrix<f64> + 'a>>,
}

impl<'a> IvpProblem<'a> {
    pub fn new(dim: usize, rhs: impl Fn(f64, &[f64], &mut [f64]) + 'a) -> Self {
        IvpProblem {
            dim,
            rhs: Box::new(rhs),
            jacobian: None,
        }
    }

    pub fn with_jacobian(mut self, jac: impl Fn(f64, &[f64]) -> DMatrix<f64> + 'a) -> Self {
        self.jacobian = Some(Box::new(jac));
        self
    }

    fn eval(&self, t: f64, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        (self.rhs)(t, y, &mut out);
        out
    }
}

/// The two stored solution levels a step starts from.
#[derive(Debug, Clone)]
pub struct History {
    pub t_nm1: f64,
    pub y_nm1: Vec<f64>,
    pub t_n: f64,
    pub y_n: Vec<f64>,
}

impl History {
    pub fn new(t_nm1: f64, y_nm1: Vec<f64>, t_n: f64, y_n: Vec<f64>) -> Result<Self, OdeError> {
        if !(t_nm1 < t_n) {
            return Err(OdeError::BadHistory);
        }
        Ok(History {
            t_nm1,
            y_nm1,
            t_n,
            y_n,
        })
    }

    pub fn k_nm1(&self) -> f64 {
        self.t_n - self.t_nm1
    }
}

#[derive(Debug, Clone, Copy)]
pub enum JacobianMode {
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone, Copy)]
pub struct NonlinearSolveOptions {
    /// Residual tolerance, relative to `1 + |y_n|`.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub jacobian_mode: JacobianMode,
}

impl Default for NonlinearSolveOptions {
    fn default() -> Self {
        NonlinearSolveOptions {
            tolerance: 1e-12,
            max_iterations: 50,
            jacobian_mode: JacobianMode::FiniteDifference,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn fd_jacobian(p: &IvpProblem, t: f64, y: &[f64], base: &[f64]) -> DMatrix<f64> {
    let d = p.dim;
    let sqrt_eps = f64::EPSILON.sqrt();
    let mut jac = DMatrix::zeros(d, d);
    let mut pert = y.to_vec();
    for j in 0..d {
        let h = sqrt_eps * (1.0 + y[j].abs());
        pert[j] = y[j] + h;
        let g = p.eval(t, &pert);
        pert[j] = y[j];
        for i in 0..d {
            jac[(i, j)] = (g[i] - base[i]) / h;
        }
    }
    jac
}

fn jacobian_of_rhs(
    p: &IvpProblem,
    t: f64,
    y: &[f64],
    base: &[f64],
    opts: &NonlinearSolveOptions,
) -> DMatrix<f64> {
    match (opts.jacobian_mode, &p.jacobian) {
        (JacobianMode::Analytic, Some(jac)) => jac(t, y),
        _ => fd_jacobian(p, t, y, base),
    }
}

/// Newton solve of `x = z + k * g(t, x)` for the backward-Euler-like kernel.
///
/// Both step forms reduce to this: the direct one-leg step divides through by
/// `alpha[2]` and solves for the beta blend, the refactorized step solves for
/// the BE value directly. The residual is checked against
/// `tolerance * (1 + |y_ref|)`.
fn solve_be_kernel(
    p: &IvpProblem,
    t: f64,
    k: f64,
    z: &[f64],
    x0: &[f64],
    y_ref_norm: f64,
    opts: &NonlinearSolveOptions,
) -> Result<Vec<f64>, OdeError> {
    let d = p.dim;
    let mut x = x0.to_vec();
    let tol = opts.tolerance * (1.0 + y_ref_norm);
    let mut residual = f64::INFINITY;
    for _ in 0..opts.max_iterations {
        let g = p.eval(t, &x);
        let mut f = vec![0.0; d];
        for i in 0..d {
            f[i] = x[i] - z[i] - k * g[i];
        }
        residual = norm(&f);
        if residual <= tol {
            return Ok(x);
        }
        let jg = jacobian_of_rhs(p, t, &x, &g, opts);
        let mut m = DMatrix::identity(d, d);
        m -= jg * k;
        let lu = m.lu();
        let delta = lu
            .solve(&DVector::from_vec(f))
            .ok_or(OdeError::SingularJacobian)?;
        for i in 0..d {
            x[i] -= delta[i];
        }
    }
    Err(OdeError::NonConvergence {
        iterations: opts.max_iterations,
        residual,
    })
}

/// One step of the direct one-leg form. Returns `(t_np1, y_np1)`.
///
/// Newton runs on the new level itself; the residual checked is the one-leg
/// relation `|alpha-blend - khat g(t_beta, beta-blend)| <= tol (1 + |y_n|)`.
pub fn dln_step(
    p: &IvpProblem,
    history: &History,
    k_n: f64,
    theta: Theta,
    opts: &NonlinearSolveOptions,
) -> Result<(f64, Vec<f64>), OdeError> {
    let steps = StepPair::new(k_n, history.k_nm1())?;
    let c = coefficients(theta, steps);
    let t_np1 = history.t_n + k_n;
    let tb = c.beta[0] * history.t_nm1 + c.beta[1] * history.t_n + c.beta[2] * t_np1;

    let d = p.dim;
    let tol = opts.tolerance * (1.0 + norm(&history.y_n));
    let mut x = history.y_n.clone();
    let mut zb = vec![0.0; d];
    let mut residual = f64::INFINITY;
    for _ in 0..opts.max_iterations {
        for i in 0..d {
            zb[i] = c.beta[2] * x[i]
                + c.beta[1] * history.y_n[i]
                + c.beta[0] * history.y_nm1[i];
        }
        let g = p.eval(tb, &zb);
        let mut f = vec![0.0; d];
        for i in 0..d {
            f[i] = c.alpha[2] * x[i]
                + c.alpha[1] * history.y_n[i]
                + c.alpha[0] * history.y_nm1[i]
                - c.khat * g[i];
        }
        residual = norm(&f);
        if residual <= tol {
            return Ok((t_np1, x));
        }
        let jg = jacobian_of_rhs(p, tb, &zb, &g, opts);
        let mut m = DMatrix::identity(d, d) * c.alpha[2];
        m -= jg * (c.khat * c.beta[2]);
        let lu = m.lu();
        let delta = lu
            .solve(&DVector::from_vec(f))
            .ok_or(OdeError::SingularJacobian)?;
        for i in 0..d {
            x[i] -= delta[i];
        }
    }
    Err(OdeError::NonConvergence {
        iterations: opts.max_iterations,
        residual,
    })
}

/// Result of a refactorized step, keeping the intermediate BE-like value.
#[derive(Debug, Clone)]
pub struct RefactorizedStep {
    pub t_np1: f64,
    pub y_np1: Vec<f64>,
    /// Solution of the backward-Euler-like solve at `t_{n,beta}`.
    pub y_be: Vec<f64>,
    /// Backward-Euler step length `(beta2 / alpha2) * khat`.
    pub k_be: f64,
}

/// One step in pre-filter / BE-like solve / post-filter form.
pub fn refactorized_step(
    p: &IvpProblem,
    history: &History,
    k_n: f64,
    theta: Theta,
    opts: &NonlinearSolveOptions,
) -> Result<RefactorizedStep, OdeError> {
    let steps = StepPair::new(k_n, history.k_nm1())?;
    let c = coefficients(theta, steps);
    let t_np1 = history.t_n + k_n;
    let tb = c.beta[0] * history.t_nm1 + c.beta[1] * history.t_n + c.beta[2] * t_np1;
    let k_be = c.k_be();
    let (cn, cnm1) = c.prefilter();

    let d = p.dim;
    let mut y_old = vec![0.0; d];
    for i in 0..d {
        y_old[i] = cn * history.y_n[i] + cnm1 * history.y_nm1[i];
    }
    let y_be = solve_be_kernel(p, tb, k_be, &y_old, &history.y_n, norm(&history.y_n), opts)?;

    let mut y_np1 = vec![0.0; d];
    for i in 0..d {
        y_np1[i] =
            (y_be[i] - c.beta[1] * history.y_n[i] - c.beta[0] * history.y_nm1[i]) / c.beta[2];
    }
    Ok(RefactorizedStep {
        t_np1,
        y_np1,
        y_be,
        k_be,
    })
}

/// Drives `dln_step` over a fixed step sequence.
///
/// The second level `y1` at `t0 + k0` must be supplied by the caller; there
/// is no automatic bootstrap. `steps` holds the step sizes after the first
/// interval, so an empty slice returns just the two initial levels.
#[allow(clippy::too_many_arguments)]
pub fn integrate(
    p: &IvpProblem,
    t0: f64,
    y0: &[f64],
    k0: f64,
    y1: &[f64],
    steps: &[f64],
    theta: Theta,
    opts: &NonlinearSolveOptions,
) -> Result<Vec<(f64, Vec<f64>)>, OdeError> {
    let mut traj = Vec::with_capacity(steps.len() + 2);
    traj.push((t0, y0.to_vec()));
    traj.push((t0 + k0, y1.to_vec()));
    let mut hist = History::new(t0, y0.to_vec(), t0 + k0, y1.to_vec())?;
    for &k in steps {
        let (t_next, y_next) = dln_step(p, &hist, k, theta, opts)?;
        traj.push((t_next, y_next.clone()));
        hist = History {
            t_nm1: hist.t_n,
            y_nm1: hist.y_n,
            t_n: t_next,
            y_n: y_next,
        };
    }
    Ok(traj)
}

/// Rolling four-level history adapting a generic IVP through the
/// accept/reject loop, with the Euclidean-norm LTE estimator.
pub struct OdeAdaptive<'a> {
    problem: &'a IvpProblem<'a>,
    theta: Theta,
    opts: NonlinearSolveOptions,
    times: Vec<f64>,
    levels: Vec<Vec<f64>>,
    pending: Option<(f64, Vec<f64>)>,
}

impl<'a> OdeAdaptive<'a> {
    pub fn new(
        problem: &'a IvpProblem<'a>,
        theta: Theta,
        opts: NonlinearSolveOptions,
        t0: f64,
        y0: Vec<f64>,
        k0: f64,
        y1: Vec<f64>,
    ) -> Self {
        OdeAdaptive {
            problem,
            theta,
            opts,
            times: vec![t0, t0 + k0],
            levels: vec![y0, y1],
            pending: None,
        }
    }

    pub fn current(&self) -> (f64, &[f64]) {
        (
            *self.times.last().unwrap(),
            self.levels.last().unwrap().as_slice(),
        )
    }
}

impl<'a> AdaptiveStepper for OdeAdaptive<'a> {
    type Error = OdeError;

    fn time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    fn attempt(&mut self, k: f64) -> Result<Option<LteEstimate>, OdeError> {
        let n = self.times.len();
        let hist = History::new(
            self.times[n - 2],
            self.levels[n - 2].clone(),
            self.times[n - 1],
            self.levels[n - 1].clone(),
        )?;
        let (t_next, y_next) = dln_step(self.problem, &hist, k, self.theta, &self.opts)?;
        let est = if n >= 4 {
            let t = [
                self.times[n - 4],
                self.times[n - 3],
                self.times[n - 2],
                self.times[n - 1],
            ];
            let pred = ab2_like_predict(
                [
                    &self.levels[n - 4],
                    &self.levels[n - 3],
                    &self.levels[n - 2],
                    &self.levels[n - 1],
                ],
                t,
                t_next,
                self.theta,
            )
            .map_err(|e| OdeError::Dln(match e {
                crate::adaptivity::AdaptError::Dln(d) => d,
                _ => DlnError::NonMonotoneTimes,
            }))?;
            let (k_nm1, k_nm2, k_nm3) = (t[3] - t[2], t[2] - t[1], t[1] - t[0]);
            let c_n = coefficients(self.theta, StepPair::new(k, k_nm1)?);
            let c_nm1 = coefficients(self.theta, StepPair::new(k_nm1, k_nm2)?);
            let c_nm2 = coefficients(self.theta, StepPair::new(k_nm2, k_nm3)?);
            let g = g_coefficient(&c_n, k / k_nm1).expect("positive ratio");
            let r = r_coefficient(
                &c_nm1,
                &c_nm2,
                [k / k_nm1, k_nm1 / k_nm2, k_nm2 / k_nm3],
            )
            .expect("positive ratios");
            let est = lte_estimate(
                std::slice::from_ref(&y_next),
                std::slice::from_ref(&pred),
                g,
                r,
                norm,
            )
            .map_err(|_| OdeError::NonConvergence {
                iterations: 0,
                residual: f64::NAN,
            })?;
            Some(est)
        } else {
            None
        };
        self.pending = Some((t_next, y_next));
        Ok(est)
    }

    fn commit(&mut self) {
        let (t, y) = self.pending.take().expect("commit without attempt");
        self.times.push(t);
        self.levels.push(y);
        if self.times.len() > 4 {
            self.times.remove(0);
            self.levels.remove(0);
        }
    }
}
