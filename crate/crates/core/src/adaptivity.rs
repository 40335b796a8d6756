//! Local-truncation-error driven step control.
//!
//! The estimator compares each accepted DLN solution against a fully explicit
//! AB2-like predictor built from the two most recent one-leg divided
//! differences. The ratio `|G| / |G + R|` of leading-error coefficients turns
//! the solution gap into an LTE estimate, and the controller applies the
//! cube-root law with hard growth/shrink clamps.

use thiserror::Error;

use crate::dln::{coefficients, DlnCoefficients, DlnError, StepPair, Theta};

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error(transparent)]
    Dln(#[from] DlnError),
    #[error("step ratio must be positive, got {0}")]
    BadRatio(f64),
    #[error("estimator hit a zero-norm solution; state is degenerate")]
    DegenerateState,
    #[error("adaptive configuration invalid: {0}")]
    BadConfig(&'static str),
}

/// The four most recent step sizes, newest first.
#[derive(Debug, Clone, Copy)]
pub struct StepHistory {
    pub k_n: f64,
    pub k_nm1: f64,
    pub k_nm2: f64,
    pub k_nm3: f64,
}

impl StepHistory {
    pub fn new(k_n: f64, k_nm1: f64, k_nm2: f64, k_nm3: f64) -> Result<Self, AdaptError> {
        for k in [k_n, k_nm1, k_nm2, k_nm3] {
            if !(k > 0.0) {
                return Err(AdaptError::BadRatio(k));
            }
        }
        Ok(StepHistory {
            k_n,
            k_nm1,
            k_nm2,
            k_nm3,
        })
    }

    pub fn tau_n(&self) -> f64 {
        self.k_n / self.k_nm1
    }

    pub fn tau_nm1(&self) -> f64 {
        self.k_nm1 / self.k_nm2
    }

    pub fn tau_nm2(&self) -> f64 {
        self.k_nm2 / self.k_nm3
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdaptiveConfig {
    /// Relative LTE target.
    pub tol: f64,
    /// Safety factor in `(0, 1]`.
    pub kappa: f64,
    pub k_min: f64,
    pub k_max: f64,
    pub grow_cap: f64,
    pub shrink_floor: f64,
}

impl AdaptiveConfig {
    pub fn new(tol: f64, kappa: f64, k_min: f64, k_max: f64) -> Result<Self, AdaptError> {
        if !(tol > 0.0) {
            return Err(AdaptError::BadConfig("tol must be positive"));
        }
        if !(kappa > 0.0 && kappa <= 1.0) {
            return Err(AdaptError::BadConfig("kappa must lie in (0, 1]"));
        }
        if !(k_min > 0.0 && k_min <= k_max) {
            return Err(AdaptError::BadConfig("need 0 < k_min <= k_max"));
        }
        Ok(AdaptiveConfig {
            tol,
            kappa,
            k_min,
            k_max,
            grow_cap: 1.5,
            shrink_floor: 0.2,
        })
    }
}

/// Per-member relative LTE estimates and their maximum.
#[derive(Debug, Clone)]
pub struct LteEstimate {
    pub value: f64,
    pub per_member: Vec<f64>,
}

/// Fully explicit AB2-like prediction of the next level.
///
/// `y = [y_nm3, y_nm2, y_nm1, y_n]` and `t` likewise ascending; `t_np1` is the
/// target time. The two slope samples are the one-leg divided differences
/// `y_{n-1,alpha} / khat_{n-1}` at `t_{n-1,beta}` and
/// `y_{n-2,alpha} / khat_{n-2}` at `t_{n-2,beta}`; the result interpolates the
/// previous four levels and never calls an implicit solver.
pub fn ab2_like_predict(
    y: [&[f64]; 4],
    t: [f64; 4],
    t_np1: f64,
    theta: Theta,
) -> Result<Vec<f64>, AdaptError> {
    let d = y[3].len();
    for yl in &y {
        if yl.len() != d {
            return Err(AdaptError::Dln(DlnError::DimensionMismatch {
                expected: d,
                got: yl.len(),
            }));
        }
    }
    if !(t[0] < t[1] && t[1] < t[2] && t[2] < t[3] && t[3] < t_np1) {
        return Err(AdaptError::Dln(DlnError::NonMonotoneTimes));
    }

    // Slope at t_{n-1,beta} from levels (y_nm2, y_nm1, y_n).
    let c1 = coefficients(theta, StepPair::new(t[3] - t[2], t[2] - t[1])?);
    let tb1 = c1.beta[0] * t[1] + c1.beta[1] * t[2] + c1.beta[2] * t[3];
    // Slope at t_{n-2,beta} from levels (y_nm3, y_nm2, y_nm1).
    let c2 = coefficients(theta, StepPair::new(t[2] - t[1], t[1] - t[0])?);
    let tb2 = c2.beta[0] * t[0] + c2.beta[1] * t[1] + c2.beta[2] * t[2];

    let t_n = t[3];
    let scale = (t_np1 - t_n) / (2.0 * (tb1 - tb2));
    let w1 = scale * (t_np1 + t_n - 2.0 * tb2);
    let w2 = scale * (t_np1 + t_n - 2.0 * tb1);

    let mut out = vec![0.0; d];
    for i in 0..d {
        let g1 = (c1.alpha[2] * y[3][i] + c1.alpha[1] * y[2][i] + c1.alpha[0] * y[1][i]) / c1.khat;
        let g2 = (c2.alpha[2] * y[2][i] + c2.alpha[1] * y[1][i] + c2.alpha[0] * y[0][i]) / c2.khat;
        out[i] = y[3][i] + w1 * g1 - w2 * g2;
    }
    Ok(out)
}

/// Leading-error coefficient `G^(n)` of the DLN step.
pub fn g_coefficient(coeffs_n: &DlnCoefficients, tau_n: f64) -> Result<f64, AdaptError> {
    if !(tau_n > 0.0) {
        return Err(AdaptError::BadRatio(tau_n));
    }
    let a0 = coeffs_n.alpha[0];
    let a2 = coeffs_n.alpha[2];
    let b2 = coeffs_n.beta[2];
    let b0 = coeffs_n.beta[0];
    let inv = 1.0 / tau_n;
    let first = (0.5 - a0 / (2.0 * a2) * inv) * (b2 - b0 * inv).powi(2);
    Ok(first + a0 / (6.0 * a2) * inv.powi(3) - 1.0 / 6.0)
}

/// Leading-error coefficient `R^(n)` of the AB2-like predictor.
///
/// `taus = [tau_n, tau_nm1, tau_nm2]`; the beta records are those of steps
/// `n-1` and `n-2`, exactly as superscripted in the defining display.
pub fn r_coefficient(
    coeffs_nm1: &DlnCoefficients,
    coeffs_nm2: &DlnCoefficients,
    taus: [f64; 3],
) -> Result<f64, AdaptError> {
    let [tau_n, tau_nm1, tau_nm2] = taus;
    for tau in taus {
        if !(tau > 0.0) {
            return Err(AdaptError::BadRatio(tau));
        }
    }
    let b2_nm1 = coeffs_nm1.beta[2];
    let b0_nm1 = coeffs_nm1.beta[0];
    let b2_nm2 = coeffs_nm2.beta[2];
    let b0_nm2 = coeffs_nm2.beta[0];

    let term1 = (1.0 - b2_nm2 / tau_nm1 + b0_nm2 / (tau_nm2 * tau_nm1))
        * (1.0 - b2_nm1 / tau_n + b0_nm1 / (tau_nm1 * tau_n));
    let term2 = (1.0 + 1.0 / tau_n - b2_nm2 / (tau_nm1 * tau_n)
        + b0_nm2 / (tau_nm2 * tau_nm1 * tau_n))
        * (-b2_nm1 + b0_nm1 / tau_nm1);
    Ok((2.0 + 3.0 / tau_n * term1 + 3.0 / tau_n * term2) / 12.0)
}

/// Relative LTE estimate `|G/(G+R)| * |y_dln - y_ab2| / |y_dln|` per member,
/// maximized across the ensemble. `norm` supplies the state norm (Euclidean
/// for plain ODE vectors, mass-weighted for FE coefficient vectors).
pub fn lte_estimate(
    y_dln: &[Vec<f64>],
    y_ab2: &[Vec<f64>],
    g: f64,
    r: f64,
    norm: impl Fn(&[f64]) -> f64,
) -> Result<LteEstimate, AdaptError> {
    assert_eq!(y_dln.len(), y_ab2.len());
    let factor = (g / (g + r)).abs();
    let mut per_member = Vec::with_capacity(y_dln.len());
    for (yd, ya) in y_dln.iter().zip(y_ab2) {
        if yd.len() != ya.len() {
            return Err(AdaptError::Dln(DlnError::DimensionMismatch {
                expected: yd.len(),
                got: ya.len(),
            }));
        }
        let denom = norm(yd);
        if !(denom > 0.0) {
            return Err(AdaptError::DegenerateState);
        }
        let diff: Vec<f64> = yd.iter().zip(ya).map(|(a, b)| a - b).collect();
        per_member.push(factor * norm(&diff) / denom);
    }
    let value = per_member.iter().cloned().fold(0.0, f64::max);
    Ok(LteEstimate { value, per_member })
}

/// Raw controller factor `min(grow_cap, max(shrink_floor, kappa (tol/est)^(1/3)))`.
pub fn controller_factor(estimate: f64, config: &AdaptiveConfig) -> f64 {
    let cube = config.kappa * (config.tol / estimate).cbrt();
    // estimate = 0 gives +inf, which the cap absorbs.
    config.grow_cap.min(config.shrink_floor.max(cube))
}

/// Next step size: controller factor applied to `k_n`, clamped to
/// `[k_min, k_max]`.
pub fn next_step(k_n: f64, estimate: f64, config: &AdaptiveConfig) -> f64 {
    (k_n * controller_factor(estimate, config)).clamp(config.k_min, config.k_max)
}

/// One attempted or committed step in a run trace.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub n: u64,
    pub t: f64,
    pub k: f64,
    pub estimate: f64,
    pub accepted: bool,
    pub rejections: u64,
}

/// Outcome of an adaptive run.
#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub steps: u64,
    pub rejections: u64,
    pub floor_accepts: u64,
    pub records: Vec<StepRecord>,
    pub completed: bool,
    pub abort: Option<String>,
}

impl RunReport {
    /// Steps plus rejections.
    pub fn total_cost(&self) -> u64 {
        self.steps + self.rejections
    }
}

/// Problem-side hooks driven by [`adaptive_loop`].
///
/// `attempt` computes a trial DLN step of size `k` from the committed state
/// and returns its LTE estimate, or `None` while fewer than four levels exist
/// (bootstrap). A subsequent `commit` makes the trial permanent; an attempt
/// that is not committed is simply superseded by the next `attempt`.
pub trait AdaptiveStepper {
    type Error: std::fmt::Display;

    fn time(&self) -> f64;
    fn attempt(&mut self, k: f64) -> Result<Option<LteEstimate>, Self::Error>;
    fn commit(&mut self);
}

/// Accept/reject loop: estimator below `tol` accepts and rescales the next
/// step; otherwise the same controller shrinks the current step and the level
/// is recomputed. A rejection that would push the step below `k_min` takes
/// the step at `k_min` and accepts it.
pub fn adaptive_loop<S: AdaptiveStepper>(
    stepper: &mut S,
    t_end: f64,
    config: &AdaptiveConfig,
) -> RunReport {
    let mut report = RunReport::default();
    let mut k_next = config.k_min;
    let time_eps = 1e-12 * t_end.abs().max(1.0);

    while stepper.time() < t_end - time_eps {
        let t_from = stepper.time();
        let mut k = k_next.min(t_end - t_from);
        let mut step_rejections = 0u64;
        loop {
            let estimate = match stepper.attempt(k) {
                Ok(est) => est,
                Err(e) => {
                    report.abort = Some(e.to_string());
                    return report;
                }
            };
            let n = report.steps + 1;
            match estimate {
                None => {
                    // Bootstrap levels carry no estimator; accept as-is.
                    stepper.commit();
                    report.steps += 1;
                    report.records.push(StepRecord {
                        n,
                        t: t_from + k,
                        k,
                        estimate: f64::NAN,
                        accepted: true,
                        rejections: 0,
                    });
                    break;
                }
                Some(est) if est.value < config.tol => {
                    stepper.commit();
                    report.steps += 1;
                    report.records.push(StepRecord {
                        n,
                        t: t_from + k,
                        k,
                        estimate: est.value,
                        accepted: true,
                        rejections: step_rejections,
                    });
                    k_next = next_step(k, est.value, config);
                    break;
                }
                Some(est) => {
                    let k_shrunk = k * controller_factor(est.value, config);
                    if k_shrunk < config.k_min && k <= config.k_min {
                        // Floor deadlock: take the step at k_min regardless.
                        stepper.commit();
                        report.steps += 1;
                        report.floor_accepts += 1;
                        report.records.push(StepRecord {
                            n,
                            t: t_from + k,
                            k,
                            estimate: est.value,
                            accepted: true,
                            rejections: step_rejections,
                        });
                        k_next = config.k_min;
                        break;
                    }
                    report.rejections += 1;
                    step_rejections += 1;
                    report.records.push(StepRecord {
                        n,
                        t: t_from + k,
                        k,
                        estimate: est.value,
                        accepted: false,
                        rejections: step_rejections,
                    });
                    k = k_shrunk.max(config.k_min);
                }
            }
        }
    }
    report.completed = true;
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg(tol: f64) -> AdaptiveConfig {
        AdaptiveConfig::new(tol, 0.95, 1e-6, 1.0).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(AdaptiveConfig::new(1e-4, 0.95, 1e-6, 1e-4).is_ok());
        assert!(AdaptiveConfig::new(-1.0, 0.95, 1e-6, 1e-4).is_err());
        assert!(AdaptiveConfig::new(1e-4, 1.5, 1e-6, 1e-4).is_err());
        assert!(AdaptiveConfig::new(1e-4, 0.95, 1e-3, 1e-4).is_err());
    }

    #[test]
    fn predictor_reproduces_constants() {
        let y = vec![4.0, -1.0];
        let t = [0.0, 0.1, 0.25, 0.3];
        let out =
            ab2_like_predict([&y, &y, &y, &y], t, 0.42, Theta::two_thirds()).unwrap();
        for (v, expect) in out.iter().zip(&y) {
            assert_relative_eq!(v, expect, epsilon = 1e-13);
        }
    }

    #[test]
    fn predictor_exact_on_linears_any_grid() {
        let f = |t: f64| 2.0 - 3.0 * t;
        let t = [0.0, 0.12, 0.2, 0.33];
        let t_next = 0.41;
        let levels: Vec<Vec<f64>> = t.iter().map(|&ti| vec![f(ti)]).collect();
        let out = ab2_like_predict(
            [&levels[0], &levels[1], &levels[2], &levels[3]],
            t,
            t_next,
            Theta::two_over_sqrt5(),
        )
        .unwrap();
        assert_relative_eq!(out[0], f(t_next), max_relative = 1e-12);
    }

    #[test]
    fn predictor_exact_on_quadratics_uniform_grid() {
        let f = |t: f64| 1.0 + 0.5 * t + 2.0 * t * t;
        let t = [0.0, 0.1, 0.2, 0.3];
        let t_next = 0.4;
        let levels: Vec<Vec<f64>> = t.iter().map(|&ti| vec![f(ti)]).collect();
        for th in [Theta::two_thirds(), Theta::new(1.0).unwrap()] {
            let out = ab2_like_predict(
                [&levels[0], &levels[1], &levels[2], &levels[3]],
                t,
                t_next,
                th,
            )
            .unwrap();
            assert_relative_eq!(out[0], f(t_next), max_relative = 1e-11);
        }
    }

    #[test]
    fn g_coefficient_theta_one_uniform() {
        let c = coefficients(Theta::new(1.0).unwrap(), StepPair::new(0.1, 0.1).unwrap());
        let g = g_coefficient(&c, 1.0).unwrap();
        assert_relative_eq!(g, -1.0 / 24.0, max_relative = 1e-14);
    }

    #[test]
    fn r_coefficient_theta_one_uniform() {
        let c = coefficients(Theta::new(1.0).unwrap(), StepPair::new(0.1, 0.1).unwrap());
        let r = r_coefficient(&c, &c, [1.0, 1.0, 1.0]).unwrap();
        assert_relative_eq!(r, 1.0 / 24.0, max_relative = 1e-14);
    }

    #[test]
    fn ratio_zero_is_rejected() {
        let c = coefficients(Theta::two_thirds(), StepPair::new(0.1, 0.1).unwrap());
        assert!(g_coefficient(&c, 0.0).is_err());
        assert!(r_coefficient(&c, &c, [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn estimator_trivial_values() {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let y = vec![vec![3.0, 4.0]];
        let est = lte_estimate(&y, &y, -0.3, 0.2, norm).unwrap();
        assert_eq!(est.value, 0.0);

        // |diff|/|y| = 1e-3 with |G/(G+R)| = 0.5 gives 5e-4.
        let yd = vec![vec![1.0, 0.0]];
        let ya = vec![vec![1.0 - 1e-3, 0.0]];
        let est = lte_estimate(&yd, &ya, -1.0, 3.0, norm).unwrap();
        assert_relative_eq!(est.value, 5e-4, max_relative = 1e-12);

        // Three members: max of the member values.
        let yd = vec![vec![1.0], vec![2.0], vec![4.0]];
        let ya = vec![vec![1.0 + 1e-4], vec![2.0 + 4e-4], vec![4.0 + 4e-4]];
        let est = lte_estimate(&yd, &ya, 1.0, 1.0, norm).unwrap();
        assert_eq!(est.per_member.len(), 3);
        assert_relative_eq!(est.value, 0.5 * 2e-4, max_relative = 1e-12);
    }

    #[test]
    fn estimator_zero_norm_is_degenerate() {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let res = lte_estimate(&[vec![0.0]], &[vec![1.0]], 1.0, 1.0, norm);
        assert!(matches!(res, Err(AdaptError::DegenerateState)));
    }

    #[test]
    fn estimator_scale_invariance() {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let yd = vec![vec![1.0, 2.0], vec![-0.5, 0.25]];
        let ya = vec![vec![1.001, 1.999], vec![-0.502, 0.251]];
        let base = lte_estimate(&yd, &ya, -0.04, 0.05, norm).unwrap();
        for c in [10.0, -3.0, 1e-6] {
            let yds: Vec<Vec<f64>> =
                yd.iter().map(|v| v.iter().map(|x| c * x).collect()).collect();
            let yas: Vec<Vec<f64>> =
                ya.iter().map(|v| v.iter().map(|x| c * x).collect()).collect();
            let scaled = lte_estimate(&yds, &yas, -0.04, 0.05, norm).unwrap();
            assert_relative_eq!(scaled.value, base.value, max_relative = 1e-12);
        }
    }

    #[test]
    fn controller_trivial_cases() {
        let c = cfg(1e-4);
        // estimate = tol: factor = kappa.
        assert_relative_eq!(next_step(1e-5, 1e-4, &c), 0.95e-5, max_relative = 1e-12);
        // huge estimate: floor 0.2.
        let big = 1e-4 * (0.95f64 / 0.2).powi(3) * 1.01;
        assert_relative_eq!(next_step(1e-5, big, &c), 0.2e-5, max_relative = 1e-12);
        // estimate -> 0: cap 1.5, then k_max clamp.
        assert_relative_eq!(next_step(1e-5, 0.0, &c), 1.5e-5, max_relative = 1e-12);
        assert_relative_eq!(next_step(0.9, 0.0, &c), 1.0, max_relative = 1e-12);
        // k_min clamp.
        assert_relative_eq!(next_step(2e-6, big, &c), 1e-6, max_relative = 1e-12);
    }

    #[test]
    fn controller_factor_always_clamped() {
        let c = cfg(1e-4);
        for est in [0.0, 1e-12, 1e-8, 1e-4, 1.0, 1e8, f64::INFINITY] {
            let f = controller_factor(est, &c);
            assert!((0.2..=1.5).contains(&f), "factor {f} at estimate {est}");
        }
    }

    /// Scripted stepper: returns a prescribed estimate sequence.
    struct Scripted {
        t: f64,
        estimates: Vec<f64>,
        idx: usize,
        pending: f64,
        committed_ks: Vec<f64>,
    }

    impl AdaptiveStepper for Scripted {
        type Error = std::convert::Infallible;

        fn time(&self) -> f64 {
            self.t
        }

        fn attempt(&mut self, k: f64) -> Result<Option<LteEstimate>, Self::Error> {
            self.pending = k;
            let est = self.estimates[self.idx.min(self.estimates.len() - 1)];
            self.idx += 1;
            Ok(Some(LteEstimate {
                value: est,
                per_member: vec![est],
            }))
        }

        fn commit(&mut self) {
            self.t += self.pending;
            self.committed_ks.push(self.pending);
        }
    }

    #[test]
    fn forced_small_estimates_grow_by_min_of_cap_and_kappa_factor() {
        // estimate = tol / 8 each step: factor = min(1.5, 0.95 * 2) = 1.5.
        let c = AdaptiveConfig::new(1e-4, 0.95, 1e-6, 1.0).unwrap();
        let mut s = Scripted {
            t: 0.0,
            estimates: vec![1e-4 / 8.0; 40],
            idx: 0,
            pending: 0.0,
            committed_ks: Vec::new(),
        };
        let report = adaptive_loop(&mut s, 1e-3, &c);
        assert!(report.completed);
        assert_eq!(report.rejections, 0);
        let expected_factor: f64 = 1.5f64.min(0.95 * 2.0);
        // Growth by the expected factor, well before the end-of-interval clamp.
        for w in s.committed_ks[..8].windows(2) {
            assert_relative_eq!(w[1] / w[0], expected_factor, max_relative = 1e-12);
        }
    }

    #[test]
    fn rejections_shrink_then_accept() {
        let c = AdaptiveConfig::new(1e-4, 0.95, 1e-9, 1.0).unwrap();
        // Grow away from the floor first, then two oversized attempts, then fine.
        let mut estimates = vec![1e-6; 10];
        estimates.extend([1e-2, 5e-3]);
        estimates.extend(vec![1e-5; 30]);
        let mut s = Scripted {
            t: 0.0,
            estimates,
            idx: 0,
            pending: 0.0,
            committed_ks: Vec::new(),
        };
        let report = adaptive_loop(&mut s, 1e-6, &c);
        assert!(report.completed);
        assert_eq!(report.rejections, 2);
        assert!(report.steps >= 12);
        // Every rejection strictly decreased the attempted step.
        let rejected: Vec<&StepRecord> =
            report.records.iter().filter(|r| !r.accepted).collect();
        assert_eq!(rejected.len(), 2);
        assert!(rejected[1].k < rejected[0].k);
    }

    #[test]
    fn floor_deadlock_accepts_at_k_min() {
        let c = AdaptiveConfig::new(1e-6, 0.95, 1e-5, 1.0).unwrap();
        let mut s = Scripted {
            t: 0.0,
            estimates: vec![1.0; 64],
            idx: 0,
            pending: 0.0,
            committed_ks: Vec::new(),
        };
        let report = adaptive_loop(&mut s, 4e-5, &c);
        assert!(report.completed);
        assert!(report.floor_accepts > 0);
        assert!(s.committed_ks.iter().all(|&k| k <= 1e-5 + 1e-18));
    }
}
