//! Core arithmetic of the DLN one-leg, two-step family.
//!
//! Everything here is pure and dimension-agnostic: coefficient tables for a
//! given `(theta, k_n, k_nm1)` triple, the alpha/beta/star blends of three
//! consecutive solution vectors, the G-weighted norm of a solution pair and
//! the stability identity that ties them together.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DlnError {
    #[error("theta must lie in [0, 1], got {0}")]
    InvalidTheta(f64),
    #[error("time step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("time triple must be strictly increasing")]
    NonMonotoneTimes,
}

/// Method parameter of the DLN family, restricted to `[0, 1]`.
///
/// `theta = 1` is the midpoint rule, `theta = 0` the two-step midpoint rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Theta(f64);

impl Theta {
    pub fn new(value: f64) -> Result<Self, DlnError> {
        if !(0.0..=1.0).contains(&value) || !value.is_finite() {
            return Err(DlnError::InvalidTheta(value));
        }
        Ok(Theta(value))
    }

    /// Balances truncation-error magnitude against damping.
    pub fn two_thirds() -> Self {
        Theta(2.0 / 3.0)
    }

    /// Best stability at infinity within the family.
    pub fn two_over_sqrt5() -> Self {
        Theta(2.0 / 5.0_f64.sqrt())
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// The two most recent step sizes `(k_n, k_nm1)`, both positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepPair {
    pub k_n: f64,
    pub k_nm1: f64,
}

impl StepPair {
    pub fn new(k_n: f64, k_nm1: f64) -> Result<Self, DlnError> {
        for k in [k_n, k_nm1] {
            if !(k > 0.0) || !k.is_finite() {
                return Err(DlnError::InvalidStep(k));
            }
        }
        Ok(StepPair { k_n, k_nm1 })
    }

    /// Step variability `(k_n - k_nm1) / (k_n + k_nm1)`, always in `(-1, 1)`.
    pub fn epsilon(self) -> f64 {
        (self.k_n - self.k_nm1) / (self.k_n + self.k_nm1)
    }

    /// Step ratio `k_n / k_nm1`.
    pub fn ratio(self) -> f64 {
        self.k_n / self.k_nm1
    }
}

/// All per-step scheme numbers for one `(theta, k_n, k_nm1)` triple.
///
/// Coefficient triples are indexed by level offset: `alpha[l]` multiplies
/// `y_{n-1+l}`. The discrete sum constraints hold exactly in floating point
/// by construction: `alpha[1] = -(alpha[0] + alpha[2])`,
/// `beta[1] = 1 - (beta[2] + beta[0])` and `gamma[0] = -(gamma[1] + gamma[2])`.
#[derive(Debug, Clone, Copy)]
pub struct DlnCoefficients {
    pub alpha: [f64; 3],
    pub beta: [f64; 3],
    pub gamma: [f64; 3],
    pub eps: f64,
    pub khat: f64,
    /// Weights of `z_{n,*} = star[1] * z_n + star[0] * z_{n-1}`.
    pub star: [f64; 2],
    pub theta: f64,
    pub k_n: f64,
    pub k_nm1: f64,
}

/// Evaluates the closed-form coefficient table.
pub fn coefficients(theta: Theta, steps: StepPair) -> DlnCoefficients {
    let th = theta.value();
    let eps = steps.epsilon();

    let alpha2 = 0.5 * (th + 1.0);
    let alpha0 = 0.5 * (th - 1.0);
    let alpha1 = -(alpha0 + alpha2);

    // Shared rational kernel (1 - theta^2) / (1 + eps*theta)^2 of the beta table.
    let denom = 1.0 + eps * th;
    let q = (1.0 - th * th) / (denom * denom);
    let beta2 = 0.25 * (1.0 + q + eps * eps * th * q + th);
    let beta0 = 0.25 * (1.0 + q - eps * eps * th * q - th);
    let beta1 = 1.0 - (beta2 + beta0);

    let gamma1 = -(th * (1.0 - th * th)).sqrt() / (2.0_f64.sqrt() * denom);
    let gamma2 = -0.5 * (1.0 - eps) * gamma1;
    let gamma0 = -(gamma1 + gamma2);

    let khat = alpha2 * steps.k_n - alpha0 * steps.k_nm1;

    let w1 = beta2 * (1.0 + steps.ratio()) + beta1;
    let w0 = 1.0 - w1;

    DlnCoefficients {
        alpha: [alpha0, alpha1, alpha2],
        beta: [beta0, beta1, beta2],
        gamma: [gamma0, gamma1, gamma2],
        eps,
        khat,
        star: [w0, w1],
        theta: th,
        k_n: steps.k_n,
        k_nm1: steps.k_nm1,
    }
}

impl DlnCoefficients {
    /// Backward-Euler step length of the refactorized form,
    /// `k_be = (beta[2] / alpha[2]) * khat`.
    pub fn k_be(&self) -> f64 {
        self.beta[2] / self.alpha[2] * self.khat
    }

    /// Pre-filter weights `(c_n, c_nm1)` of the refactorized form:
    /// `z_old = c_n z_n + c_nm1 z_nm1`.
    pub fn prefilter(&self) -> (f64, f64) {
        let r = self.beta[2] / self.alpha[2];
        (
            self.beta[1] - self.alpha[1] * r,
            self.beta[0] - self.alpha[0] * r,
        )
    }

    pub fn alpha_sum(&self) -> f64 {
        (self.alpha[0] + self.alpha[2]) + self.alpha[1]
    }

    pub fn beta_sum(&self) -> f64 {
        (self.beta[2] + self.beta[0]) + self.beta[1]
    }

    pub fn gamma_sum(&self) -> f64 {
        (self.gamma[1] + self.gamma[2]) + self.gamma[0]
    }
}

fn check_dims(dims: &[usize]) -> Result<usize, DlnError> {
    let d = dims[0];
    for &other in &dims[1..] {
        if other != d {
            return Err(DlnError::DimensionMismatch {
                expected: d,
                got: other,
            });
        }
    }
    Ok(d)
}

fn blend3(y: [&[f64]; 3], w: [f64; 3]) -> Result<Vec<f64>, DlnError> {
    let d = check_dims(&[y[0].len(), y[1].len(), y[2].len()])?;
    let mut out = vec![0.0; d];
    for i in 0..d {
        out[i] = w[0] * y[0][i] + w[1] * y[1][i] + w[2] * y[2][i];
    }
    Ok(out)
}

/// `sum_l alpha[l] y_{n-1+l}` for `y = [y_nm1, y_n, y_np1]`.
pub fn blend_alpha(y: [&[f64]; 3], coeffs: &DlnCoefficients) -> Result<Vec<f64>, DlnError> {
    blend3(y, coeffs.alpha)
}

/// `sum_l beta[l] y_{n-1+l}` for `y = [y_nm1, y_n, y_np1]`.
pub fn blend_beta(y: [&[f64]; 3], coeffs: &DlnCoefficients) -> Result<Vec<f64>, DlnError> {
    blend3(y, coeffs.beta)
}

/// `sum_l gamma[l] y_{n-1+l}`, the numerical-dissipation combination.
pub fn blend_gamma(y: [&[f64]; 3], coeffs: &DlnCoefficients) -> Result<Vec<f64>, DlnError> {
    blend3(y, coeffs.gamma)
}

/// Explicit two-level blend `z_{n,*} = star[1] y_n + star[0] y_nm1`
/// for `y = [y_nm1, y_n]`.
pub fn blend_star(y: [&[f64]; 2], coeffs: &DlnCoefficients) -> Result<Vec<f64>, DlnError> {
    let d = check_dims(&[y[0].len(), y[1].len()])?;
    let mut out = vec![0.0; d];
    for i in 0..d {
        out[i] = coeffs.star[0] * y[0][i] + coeffs.star[1] * y[1][i];
    }
    Ok(out)
}

/// Beta-weighted time point `t_{n,beta}` of the triple `[t_nm1, t_n, t_np1]`.
pub fn t_beta(t: [f64; 3], coeffs: &DlnCoefficients) -> Result<f64, DlnError> {
    if !(t[0] < t[1] && t[1] < t[2]) {
        return Err(DlnError::NonMonotoneTimes);
    }
    Ok(coeffs.beta[0] * t[0] + coeffs.beta[1] * t[1] + coeffs.beta[2] * t[2])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Squared G-weighted norm of a solution pair `(u, v)`:
/// `(1+theta)/4 |u|^2 + (1-theta)/4 |v|^2`.
pub fn g_norm_sq(u: &[f64], v: &[f64], theta: Theta) -> Result<f64, DlnError> {
    check_dims(&[u.len(), v.len()])?;
    let th = theta.value();
    Ok(0.25 * (1.0 + th) * dot(u, u) + 0.25 * (1.0 - th) * dot(v, v))
}

/// Absolute defect of the G-stability identity for one solution triple
/// `y = [y_nm1, y_n, y_np1]`:
///
/// `(z_alpha, z_beta) = |(y_np1, y_n)|_G^2 - |(y_n, y_nm1)|_G^2 + |z_gamma|^2`
///
/// Zero (up to roundoff) for every theta in `[0, 1]` and step pair.
pub fn g_identity_residual(y: [&[f64]; 3], theta: Theta, steps: StepPair) -> f64 {
    let c = coefficients(theta, steps);
    let za = blend_alpha(y, &c).expect("dimension checked by caller");
    let zb = blend_beta(y, &c).expect("dimension checked by caller");
    let zg = blend_gamma(y, &c).expect("dimension checked by caller");
    let lhs = dot(&za, &zb);
    let g_new = g_norm_sq(y[2], y[1], theta).expect("dims");
    let g_old = g_norm_sq(y[1], y[0], theta).expect("dims");
    let rhs = g_new - g_old + dot(&zg, &zg);
    (lhs - rhs).abs()
}

/// Magnitude scale of the identity terms, for relative residual checks.
pub fn g_identity_scale(y: [&[f64]; 3], theta: Theta, steps: StepPair) -> f64 {
    let c = coefficients(theta, steps);
    let za = blend_alpha(y, &c).expect("dims");
    let zb = blend_beta(y, &c).expect("dims");
    let zg = blend_gamma(y, &c).expect("dims");
    let g_new = g_norm_sq(y[2], y[1], theta).expect("dims");
    let g_old = g_norm_sq(y[1], y[0], theta).expect("dims");
    dot(&za, &zb)
        .abs()
        .max(g_new.max(g_old))
        .max(dot(&zg, &zg))
        .max(1.0)
}
