//! Manufactured Taylor-Green solutions and their induced forcing.
//!
//! The spatial profile is the revised Taylor-Green vortex on the unit square;
//! the time factor is either `sin(omega t)` or one of the two components of
//! Lindberg's stiff system. Member `j` scales velocity by `1 + delta_j`; the
//! pressure is shared by all members. The forcing is the analytic momentum
//! residual, evaluated pointwise in closed form.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManufacturedError {
    #[error("Lindberg exponent g1 = {g1:.3e} at t = {t:.6} overflows")]
    Overflow { t: f64, g1: f64 },
    #[error("Lindberg component must be 1 or 2, got {0}")]
    BadComponent(u8),
}

/// Time dependence of the exact solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeFactor {
    SinOmega { omega: f64 },
    Lindberg1 { omega: f64 },
    Lindberg2 { omega: f64 },
}

const LINDBERG_EXP_CAP: f64 = 700.0;

// Phase functions of Lindberg's stiff pair. The quoted trajectory (G1 rising
// to ~300 at t = 1.6015 and dropping to ~-200 at 1.6032; G2 reaching ~16 at
// t = 1.598 then ~-700 by 1.602, all at omega = 3.1) pins the phase to
// g2 = 10^omega (1 - (1 + t) e^{-t}).
fn lindberg_parts(omega: f64, t: f64) -> Result<(f64, f64, f64, f64), ManufacturedError> {
    let scale = 10.0_f64.powf(omega);
    let g1 = scale * (t + 2.0 * (-t).exp() - 2.0);
    if g1 > LINDBERG_EXP_CAP {
        return Err(ManufacturedError::Overflow { t, g1 });
    }
    let g2 = scale * (1.0 - (1.0 + t) * (-t).exp());
    let g1_dot = scale * (1.0 - 2.0 * (-t).exp());
    let g2_dot = scale * t * (-t).exp();
    Ok((g1, g2, g1_dot, g2_dot))
}

/// Lindberg components `G_1`, `G_2` with the explosive-exponent guard.
pub fn lindberg_time_factor(which: u8, omega: f64, t: f64) -> Result<f64, ManufacturedError> {
    let (g1, g2, _, _) = lindberg_parts(omega, t)?;
    let e = g1.exp();
    match which {
        1 => Ok(e * (g2.cos() + g2.sin())),
        2 => Ok(e * (g2.cos() - g2.sin())),
        other => Err(ManufacturedError::BadComponent(other)),
    }
}

impl TimeFactor {
    /// Velocity time factor `s(t)`.
    pub fn value(&self, t: f64) -> Result<f64, ManufacturedError> {
        match *self {
            TimeFactor::SinOmega { omega } => Ok((omega * t).sin()),
            TimeFactor::Lindberg1 { omega } => lindberg_time_factor(1, omega, t),
            TimeFactor::Lindberg2 { omega } => lindberg_time_factor(2, omega, t),
        }
    }

    /// `s'(t)`. For the Lindberg pair, `G1' = g1' G1 + g2' G2` and
    /// `G2' = g1' G2 - g2' G1`.
    pub fn derivative(&self, t: f64) -> Result<f64, ManufacturedError> {
        match *self {
            TimeFactor::SinOmega { omega } => Ok(omega * (omega * t).cos()),
            TimeFactor::Lindberg1 { omega } => {
                let (g1, g2, g1d, g2d) = lindberg_parts(omega, t)?;
                let e = g1.exp();
                let v1 = e * (g2.cos() + g2.sin());
                let v2 = e * (g2.cos() - g2.sin());
                Ok(g1d * v1 + g2d * v2)
            }
            TimeFactor::Lindberg2 { omega } => {
                let (g1, g2, g1d, g2d) = lindberg_parts(omega, t)?;
                let e = g1.exp();
                let v1 = e * (g2.cos() + g2.sin());
                let v2 = e * (g2.cos() - g2.sin());
                Ok(g1d * v2 - g2d * v1)
            }
        }
    }

    /// Pressure time factor: `sin^2(omega t)` for the oscillatory variant,
    /// the Lindberg component itself for the stiff variants.
    pub fn pressure_value(&self, t: f64) -> Result<f64, ManufacturedError> {
        match *self {
            TimeFactor::SinOmega { omega } => Ok((omega * t).sin().powi(2)),
            _ => self.value(t),
        }
    }
}

/// Per-member amplitude perturbations, uniform in `[-delta_bar, delta_bar]`
/// and sorted ascending; fully determined by the seed.
#[derive(Debug, Clone)]
pub struct PerturbationSet {
    pub j: usize,
    pub delta_bar: f64,
    pub seed: u64,
    pub values: Vec<f64>,
}

impl PerturbationSet {
    pub fn draw(j: usize, delta_bar: f64, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut values: Vec<f64> = if delta_bar == 0.0 {
            vec![0.0; j]
        } else {
            let dist = Uniform::new_inclusive(-delta_bar, delta_bar).expect("valid range");
            (0..j).map(|_| dist.sample(&mut rng)).collect()
        };
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        PerturbationSet {
            j,
            delta_bar,
            seed,
            values,
        }
    }
}

/// Exact solution family with its induced forcing.
#[derive(Debug, Clone)]
pub struct ManufacturedSolution {
    pub variant: TimeFactor,
    pub nu: f64,
    pub deltas: Vec<f64>,
}

impl ManufacturedSolution {
    pub fn new(variant: TimeFactor, nu: f64, deltas: Vec<f64>) -> Self {
        ManufacturedSolution {
            variant,
            nu,
            deltas,
        }
    }

    fn amp(&self, member: usize) -> f64 {
        1.0 + self.deltas[member]
    }

    /// Spatial velocity profile (the time-independent vortex).
    fn profile(x: f64, y: f64) -> [f64; 2] {
        let pi = std::f64::consts::PI;
        [
            -(pi * x).cos() * (pi * y).sin(),
            (pi * x).sin() * (pi * y).cos(),
        ]
    }

    pub fn velocity(&self, member: usize, x: f64, y: f64, t: f64) -> [f64; 2] {
        let s = self.variant.value(t).expect("time factor in range");
        let p = Self::profile(x, y);
        let a = self.amp(member);
        [a * p[0] * s, a * p[1] * s]
    }

    /// `grad u` rows indexed by component: `[du_c/dx, du_c/dy]`.
    pub fn velocity_gradient(&self, member: usize, x: f64, y: f64, t: f64) -> [[f64; 2]; 2] {
        let pi = std::f64::consts::PI;
        let s = self.variant.value(t).expect("time factor in range");
        let a = self.amp(member) * s * pi;
        [
            [
                a * (pi * x).sin() * (pi * y).sin(),
                -a * (pi * x).cos() * (pi * y).cos(),
            ],
            [
                a * (pi * x).cos() * (pi * y).cos(),
                -a * (pi * x).sin() * (pi * y).sin(),
            ],
        ]
    }

    /// Shared (member-independent) pressure.
    pub fn pressure(&self, x: f64, y: f64, t: f64) -> f64 {
        let pi = std::f64::consts::PI;
        let pf = self.variant.pressure_value(t).expect("time factor in range");
        -0.25 * ((2.0 * pi * x).cos() + (2.0 * pi * y).cos()) * pf
    }

    /// Analytic momentum residual
    /// `f = u_t + (u . grad) u - nu lap u + grad p` for member `j`.
    pub fn forcing(&self, member: usize, x: f64, y: f64, t: f64) -> [f64; 2] {
        let pi = std::f64::consts::PI;
        let s = self.variant.value(t).expect("time factor in range");
        let s_dot = self.variant.derivative(t).expect("time factor in range");
        let pf = self.variant.pressure_value(t).expect("time factor in range");
        let a = self.amp(member);
        let prof = Self::profile(x, y);
        // lap u = -2 pi^2 u; (u.grad)u = -(pi/2) s^2 (sin 2pi x, sin 2pi y)
        // for the unit-amplitude profile; grad p carries the opposite sign.
        let lin = a * (s_dot + 2.0 * pi * pi * self.nu * s);
        let quad = 0.5 * pi * (pf - a * a * s * s);
        [
            lin * prof[0] + quad * (2.0 * pi * x).sin(),
            lin * prof[1] + quad * (2.0 * pi * y).sin(),
        ]
    }

    /// Closed-form kinetic energy `|u^j(t)|^2 / 2 = (1 + delta_j)^2 s(t)^2 / 4`.
    pub fn exact_kinetic_energy(&self, member: usize, t: f64) -> f64 {
        let s = self.variant.value(t).expect("time factor in range");
        let a = self.amp(member);
        0.25 * a * a * s * s
    }

    pub fn exact_energy_mean_max(&self, t: f64) -> (f64, f64) {
        let j = self.deltas.len();
        let mut mean = 0.0;
        let mut max = 0.0f64;
        for m in 0..j {
            let e = self.exact_kinetic_energy(m, t);
            mean += e;
            max = max.max(e);
        }
        (mean / j as f64, max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn lindberg_at_zero_is_one() {
        assert_relative_eq!(lindberg_time_factor(1, 3.1, 0.0).unwrap(), 1.0);
        assert_relative_eq!(lindberg_time_factor(2, 3.1, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn lindberg_peak_magnitudes() {
        // Published trajectory for omega = 3.1: G1 rises to about 300 near
        // t = 1.6015 and falls to about -200 by t = 1.6032; both read off a
        // plot, so allow 15%.
        let g_peak = lindberg_time_factor(1, 3.1, 1.6015).unwrap();
        assert!((g_peak - 300.0).abs() <= 45.0, "peak {g_peak}");
        let g_drop = lindberg_time_factor(1, 3.1, 1.6032).unwrap();
        assert!((g_drop + 200.0).abs() <= 30.0, "drop {g_drop}");
        // G2 companion values: ~16 at t = 1.598, ~-700 at t = 1.602.
        let g2_bump = lindberg_time_factor(2, 3.1, 1.598).unwrap();
        assert!((g2_bump - 16.0).abs() <= 16.0 * 0.2, "bump {g2_bump}");
        let g2_drop = lindberg_time_factor(2, 3.1, 1.602).unwrap();
        assert!((g2_drop + 700.0).abs() <= 105.0, "drop {g2_drop}");
    }

    #[test]
    fn lindberg_overflow_is_caught() {
        let res = lindberg_time_factor(1, 3.1, 3.0);
        assert!(matches!(res, Err(ManufacturedError::Overflow { .. })));
        assert!(matches!(
            lindberg_time_factor(3, 3.1, 0.0),
            Err(ManufacturedError::BadComponent(3))
        ));
    }

    #[test]
    fn lindberg_derivative_matches_finite_differences() {
        let f = TimeFactor::Lindberg2 { omega: 3.1 };
        for t in [1.59, 1.595, 1.6] {
            let h = 1e-7;
            let fd = (f.value(t + h).unwrap() - f.value(t - h).unwrap()) / (2.0 * h);
            let an = f.derivative(t).unwrap();
            assert_relative_eq!(an, fd, max_relative = 1e-5);
        }
    }

    #[test]
    fn perturbations_are_sorted_bounded_and_deterministic() {
        let a = PerturbationSet::draw(10, 0.01, 42);
        let b = PerturbationSet::draw(10, 0.01, 42);
        assert_eq!(a.values, b.values);
        assert!(a.values.windows(2).all(|w| w[0] <= w[1]));
        assert!(a.values.iter().all(|v| v.abs() <= 0.01));
        let c = PerturbationSet::draw(10, 0.01, 43);
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn forcing_matches_finite_difference_residual() {
        // Independent oracle: central differences of the exact fields in
        // x, y, t reproduce the momentum residual.
        let sol = ManufacturedSolution::new(
            TimeFactor::SinOmega { omega: 10.0 },
            5e-3,
            vec![-0.01, 0.004, 0.01],
        );
        let h = 1e-5;
        let mut worst = 0.0f64;
        let mut state = 0x243f6a8885a308d3u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..100 {
            let (x, y, t) = (0.05 + 0.9 * next(), 0.05 + 0.9 * next(), next());
            let m = (next() * 3.0) as usize;
            let u = |x: f64, y: f64, t: f64| sol.velocity(m, x, y, t);
            let u0 = u(x, y, t);
            let ut = [
                (u(x, y, t + h)[0] - u(x, y, t - h)[0]) / (2.0 * h),
                (u(x, y, t + h)[1] - u(x, y, t - h)[1]) / (2.0 * h),
            ];
            let ux = [
                (u(x + h, y, t)[0] - u(x - h, y, t)[0]) / (2.0 * h),
                (u(x + h, y, t)[1] - u(x - h, y, t)[1]) / (2.0 * h),
            ];
            let uy = [
                (u(x, y + h, t)[0] - u(x, y - h, t)[0]) / (2.0 * h),
                (u(x, y + h, t)[1] - u(x, y - h, t)[1]) / (2.0 * h),
            ];
            let lap = [
                (u(x + h, y, t)[0] + u(x - h, y, t)[0] + u(x, y + h, t)[0]
                    + u(x, y - h, t)[0]
                    - 4.0 * u0[0])
                    / (h * h),
                (u(x + h, y, t)[1] + u(x - h, y, t)[1] + u(x, y + h, t)[1]
                    + u(x, y - h, t)[1]
                    - 4.0 * u0[1])
                    / (h * h),
            ];
            let px = (sol.pressure(x + h, y, t) - sol.pressure(x - h, y, t)) / (2.0 * h);
            let py = (sol.pressure(x, y + h, t) - sol.pressure(x, y - h, t)) / (2.0 * h);
            let f = sol.forcing(m, x, y, t);
            let fd = [
                ut[0] + u0[0] * ux[0] + u0[1] * uy[0] - sol.nu * lap[0] + px,
                ut[1] + u0[0] * ux[1] + u0[1] * uy[1] - sol.nu * lap[1] + py,
            ];
            worst = worst.max((f[0] - fd[0]).abs()).max((f[1] - fd[1]).abs());
        }
        assert!(worst <= 1e-5, "worst forcing mismatch {worst}");
    }

    #[test]
    fn forcing_at_time_zero_reduces_to_acceleration_and_pressure() {
        // sin(0) kills every velocity term except u_t; pressure is zero too,
        // so f(0) = (1 + delta) omega * profile.
        let sol = ManufacturedSolution::new(
            TimeFactor::SinOmega { omega: 10.0 },
            5e-3,
            vec![0.0, 0.02],
        );
        let pi = std::f64::consts::PI;
        for (m, (x, y)) in [(0usize, (0.3, 0.7)), (1, (0.6, 0.2))] {
            let f = sol.forcing(m, x, y, 0.0);
            let a = 1.0 + sol.deltas[m];
            let expect = [
                -a * 10.0 * (pi * x).cos() * (pi * y).sin(),
                a * 10.0 * (pi * x).sin() * (pi * y).cos(),
            ];
            assert_relative_eq!(f[0], expect[0], max_relative = 1e-13);
            assert_relative_eq!(f[1], expect[1], max_relative = 1e-13);
        }
    }

    #[test]
    fn forcing_scaling_structure_in_member_amplitude() {
        // Linear terms scale by (1 + delta), convection by (1 + delta)^2.
        let nu = 1e-2;
        let base = ManufacturedSolution::new(TimeFactor::SinOmega { omega: 4.0 }, nu, vec![0.0]);
        let delta = 0.05;
        let pert = ManufacturedSolution::new(TimeFactor::SinOmega { omega: 4.0 }, nu, vec![delta]);
        let (x, y, t) = (0.37, 0.81, 0.6_f64);
        let pi = std::f64::consts::PI;
        let s = (4.0 * t).sin();
        let sd = 4.0 * (4.0f64 * t).cos();
        let f0 = base.forcing(0, x, y, t);
        let f1 = pert.forcing(0, x, y, t);
        let a = 1.0 + delta;
        let lin = |amp: f64| {
            let prof = [-(pi * x).cos() * (pi * y).sin(), (pi * x).sin() * (pi * y).cos()];
            [
                amp * (sd + 2.0 * pi * pi * nu * s) * prof[0],
                amp * (sd + 2.0 * pi * pi * nu * s) * prof[1],
            ]
        };
        let quad = |amp: f64| {
            let c = 0.5 * pi * (s * s - amp * amp * s * s);
            [c * (2.0 * pi * x).sin(), c * (2.0 * pi * y).sin()]
        };
        let l0 = lin(1.0);
        let q0 = quad(1.0);
        assert_relative_eq!(f0[0], l0[0] + q0[0], max_relative = 1e-12);
        let l1 = lin(a);
        let q1 = quad(a);
        assert_relative_eq!(f1[0], l1[0] + q1[0], max_relative = 1e-12);
        assert_relative_eq!(f1[1], l1[1] + q1[1], max_relative = 1e-12);
    }

    #[test]
    fn exact_energy_closed_form() {
        // Unperturbed field: E(t) = sin^2(omega t) / 4 by separability.
        let sol = ManufacturedSolution::new(TimeFactor::SinOmega { omega: 10.0 }, 5e-3, vec![0.0]);
        for t in [0.1, 0.25, 0.7] {
            let e = sol.exact_kinetic_energy(0, t);
            assert_relative_eq!(e, 0.25 * (10.0 * t).sin().powi(2), max_relative = 1e-14);
        }
    }
}
