//! The DLN-Ensemble time step for J Navier-Stokes systems.
//!
//! Every member's convection is split into the shared ensemble-mean part,
//! treated implicitly, and a lagged fluctuation part moved to the right-hand
//! side. All J members therefore share one saddle-point matrix per step: one
//! numeric factorization serves J right-hand sides. The step constrains the
//! beta blends of velocity and pressure; unknowns are `u_{n+1}` and the blend
//! pressure, from which `p_{n+1}` is extracted, matching the post-filter of
//! the refactorized form so both paths stay numerically compatible.

use std::time::{Duration, Instant};

use thiserror::Error;

use crate::adaptivity::{
    ab2_like_predict, g_coefficient, lte_estimate, r_coefficient, AdaptError, AdaptiveStepper,
    LteEstimate,
};
use crate::dln::{blend_gamma, coefficients, DlnCoefficients, DlnError, StepPair, Theta};
use crate::fem::{
    assemble_convection_into, assemble_load, assemble_mass, assemble_operators, convection_apply,
    FeSpaces, FemError, Operators, SparseLuSymbolic, SparseMatrix,
};

#[derive(Debug, Error)]
pub enum NseError {
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Dln(#[from] DlnError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error("non-finite solution for member {member} at t = {t:.6e}; run aborted")]
    Instability { member: usize, t: f64 },
    #[error("step variability eps = {0:.6} too close to 1")]
    DegenerateRatio(f64),
}

/// Viscosity, per-member forcing and Dirichlet boundary data.
pub struct NsePhysics {
    pub nu: f64,
    /// `(member, x, y, t) -> f`.
    pub forcing: Box<dyn Fn(usize, f64, f64, f64) -> [f64; 2] + Send + Sync>,
    /// `(member, x, y, t) -> u` on the boundary.
    pub boundary: Box<dyn Fn(usize, f64, f64, f64) -> [f64; 2] + Send + Sync>,
}

impl NsePhysics {
    pub fn new(
        nu: f64,
        forcing: impl Fn(usize, f64, f64, f64) -> [f64; 2] + Send + Sync + 'static,
        boundary: impl Fn(usize, f64, f64, f64) -> [f64; 2] + Send + Sync + 'static,
    ) -> Self {
        assert!(nu > 0.0, "viscosity must be positive");
        NsePhysics {
            nu,
            forcing: Box::new(forcing),
            boundary: Box::new(boundary),
        }
    }

    /// Homogeneous Dirichlet walls.
    pub fn homogeneous(
        nu: f64,
        forcing: impl Fn(usize, f64, f64, f64) -> [f64; 2] + Send + Sync + 'static,
    ) -> Self {
        Self::new(nu, forcing, |_, _, _, _| [0.0, 0.0])
    }
}

/// Velocity and pressure coefficients of one member at the two stored levels.
#[derive(Debug, Clone)]
pub struct MemberState {
    pub u_n: Vec<f64>,
    pub u_nm1: Vec<f64>,
    pub p_n: Vec<f64>,
    pub p_nm1: Vec<f64>,
}

/// The two most recent levels of all J members plus the last step taken.
#[derive(Debug, Clone)]
pub struct EnsembleState {
    pub t_n: f64,
    pub k_nm1: f64,
    pub members: Vec<MemberState>,
}

impl EnsembleState {
    pub fn j(&self) -> usize {
        self.members.len()
    }
}

/// Raw per-member CFL-like indicator values (the unknown constant
/// `C(Omega, theta)` is not applied) and the step-ratio factor.
#[derive(Debug, Clone)]
pub struct CflIndicator {
    pub per_member: Vec<f64>,
    pub ratio_factor: f64,
}

impl CflIndicator {
    pub fn max(&self) -> f64 {
        self.per_member.iter().cloned().fold(0.0, f64::max)
    }
}

/// Instrumentation of a single ensemble step.
#[derive(Debug, Clone)]
pub struct StepDiagnostics {
    pub factorizations: u64,
    pub solves: u64,
    pub cfl: CflIndicator,
    /// Max over members of the Euclidean divergence residual `|B u_beta|`.
    pub divergence_residual: f64,
    pub assembly_time: Duration,
    pub factor_time: Duration,
    pub solve_time: Duration,
}

/// Two interpolated levels per member from analytic fields.
pub fn initialize_from_exact(
    spaces: &FeSpaces,
    j: usize,
    velocity: impl Fn(usize, f64, f64, f64) -> [f64; 2],
    pressure: impl Fn(usize, f64, f64, f64) -> f64,
    t0: f64,
    k0: f64,
) -> EnsembleState {
    let members = (0..j)
        .map(|m| MemberState {
            u_nm1: spaces.interpolate_velocity(|x, y| velocity(m, x, y, t0)),
            u_n: spaces.interpolate_velocity(|x, y| velocity(m, x, y, t0 + k0)),
            p_nm1: spaces.interpolate_pressure(|x, y| pressure(m, x, y, t0)),
            p_n: spaces.interpolate_pressure(|x, y| pressure(m, x, y, t0 + k0)),
        })
        .collect();
    EnsembleState {
        t_n: t0 + k0,
        k_nm1: k0,
        members,
    }
}

/// Mean of the per-member star blends (equals the star blend of the means).
pub fn ensemble_mean_star(state: &EnsembleState, coeffs: &DlnCoefficients) -> Vec<f64> {
    let n = state.members[0].u_n.len();
    let mut mean = vec![0.0; n];
    for m in &state.members {
        for i in 0..n {
            mean[i] += coeffs.star[1] * m.u_n[i] + coeffs.star[0] * m.u_nm1[i];
        }
    }
    let inv = 1.0 / state.j() as f64;
    for v in &mut mean {
        *v *= inv;
    }
    mean
}

/// CFL-like monitor `(khat / (h nu)) |grad(u*_j - <u>*)|^2` per member.
pub fn cfl_indicator(
    state: &EnsembleState,
    coeffs: &DlnCoefficients,
    ops: &Operators,
    nu: f64,
    h: f64,
) -> Result<CflIndicator, NseError> {
    if 1.0 - coeffs.eps <= 1e-12 {
        return Err(NseError::DegenerateRatio(coeffs.eps));
    }
    let mean = ensemble_mean_star(state, coeffs);
    let mut per_member = Vec::with_capacity(state.j());
    for m in &state.members {
        let diff: Vec<f64> = (0..mean.len())
            .map(|i| coeffs.star[1] * m.u_n[i] + coeffs.star[0] * m.u_nm1[i] - mean[i])
            .collect();
        per_member.push(coeffs.khat / (h * nu) * ops.velocity_grad_sq(&diff));
    }
    let rf = (1.0 + coeffs.eps * coeffs.theta) / (1.0 - coeffs.eps);
    Ok(CflIndicator {
        per_member,
        ratio_factor: rf * rf,
    })
}

/// Kinetic energy `|u|^2 / 2` in the mass norm.
pub fn kinetic_energy(ops: &Operators, u: &[f64]) -> f64 {
    let n = ops.velocity_l2(u);
    0.5 * n * n
}

/// Viscous dissipation rate `nu |grad u|^2`.
pub fn viscous_dissipation(ops: &Operators, nu: f64, u: &[f64]) -> f64 {
    nu * ops.velocity_grad_sq(u)
}

/// Numerical dissipation `|gamma-blend|^2 / khat` over one level triple
/// `[u_nm1, u_n, u_np1]`.
pub fn numerical_dissipation(
    ops: &Operators,
    coeffs: &DlnCoefficients,
    u_nm1: &[f64],
    u_n: &[f64],
    u_np1: &[f64],
) -> f64 {
    let zg = blend_gamma([u_nm1, u_n, u_np1], coeffs).expect("levels share dimension");
    let n = ops.velocity_l2(&zg);
    n * n / coeffs.khat
}

/// Which realization of the step to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepPath {
    /// Assemble the one-leg system on the beta blends directly.
    Direct,
    /// Pre-filter, backward-Euler-like solve at `t_{n,beta}`, post-filter.
    Refactorized,
}

/// Slot maps from assembled operators into the fixed CSC saddle pattern.
struct SaddlePattern {
    n_sys: usize,
    nnz: usize,
    /// (scalar CSR entry, slot) for each velocity component block.
    a_slots: Vec<(usize, usize)>,
    /// (divergence CSR entry, slot) in the continuity block.
    b_slots: Vec<(usize, usize)>,
    /// (divergence CSR entry, slot) in the pressure-gradient block.
    bt_slots: Vec<(usize, usize)>,
    /// (pressure dof, slot) for the two multiplier legs.
    mult_slots: Vec<(usize, usize)>,
}

fn build_saddle_pattern(
    spaces: &FeSpaces,
    mass: &SparseMatrix,
    divergence: &SparseMatrix,
) -> (SaddlePattern, Vec<usize>, Vec<usize>) {
    let nu_free = 2 * spaces.n_free_scalar();
    let np = spaces.n_pressure;
    let n_sys = nu_free + np + 1;

    // kind: 0 = A block, 1 = continuity B, 2 = gradient -B^T, 3 = multiplier.
    let mut entries: Vec<(usize, usize, u8, usize)> = Vec::new();
    for i in 0..mass.nrows {
        let fi = match spaces.free_index[i] {
            Some(f) => f,
            None => continue,
        };
        let start = mass.row_ptr[i];
        let (cols, _) = mass.row(i);
        for (off, j) in cols.iter().enumerate() {
            if let Some(fj) = spaces.free_index[*j] {
                let e = start + off;
                for c in 0..2 {
                    entries.push((2 * fj + c, 2 * fi + c, 0, e));
                }
            }
        }
    }
    for q in 0..np {
        let start = divergence.row_ptr[q];
        let (cols, _) = divergence.row(q);
        for (off, col) in cols.iter().enumerate() {
            let (node, c) = (col / 2, col % 2);
            if let Some(fs) = spaces.free_index[node] {
                let e = start + off;
                let vc = 2 * fs + c;
                entries.push((vc, nu_free + q, 1, e));
                entries.push((nu_free + q, vc, 2, e));
            }
        }
    }
    for q in 0..np {
        entries.push((n_sys - 1, nu_free + q, 3, q));
        entries.push((nu_free + q, n_sys - 1, 3, q));
    }

    entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let nnz = entries.len();
    let mut col_ptr = vec![0usize; n_sys + 1];
    let mut row_idx = vec![0usize; nnz];
    let mut a_slots = Vec::new();
    let mut b_slots = Vec::new();
    let mut bt_slots = Vec::new();
    let mut mult_slots = Vec::new();
    for (slot, (col, row, kind, payload)) in entries.into_iter().enumerate() {
        col_ptr[col + 1] += 1;
        row_idx[slot] = row;
        match kind {
            0 => a_slots.push((payload, slot)),
            1 => b_slots.push((payload, slot)),
            2 => bt_slots.push((payload, slot)),
            _ => mult_slots.push((payload, slot)),
        }
    }
    for c in 0..n_sys {
        col_ptr[c + 1] += col_ptr[c];
    }
    (
        SaddlePattern {
            n_sys,
            nnz,
            a_slots,
            b_slots,
            bt_slots,
            mult_slots,
        },
        col_ptr,
        row_idx,
    )
}

/// Shared-matrix stepper for J systems on one mesh.
pub struct EnsembleSolver<'a> {
    pub spaces: &'a FeSpaces,
    pub ops: Operators,
    pub physics: NsePhysics,
    pub theta: Theta,
    pattern: SaddlePattern,
    symbolic: SparseLuSymbolic,
    /// Scratch: shared convection matrix on the mass pattern.
    convection: SparseMatrix,
    /// Scratch: CSC values of the saddle matrix.
    values: Vec<f64>,
}

struct StepContext {
    coeffs: DlnCoefficients,
    t_np1: f64,
    t_beta: f64,
    mean_star: Vec<f64>,
    star: Vec<Vec<f64>>,
}

impl<'a> EnsembleSolver<'a> {
    pub fn new(spaces: &'a FeSpaces, physics: NsePhysics, theta: Theta) -> Result<Self, NseError> {
        let ops = assemble_operators(spaces);
        let (pattern, col_ptr, row_idx) = build_saddle_pattern(spaces, &ops.mass, &ops.divergence);
        let symbolic = SparseLuSymbolic::new(pattern.n_sys, col_ptr, row_idx)?;
        let convection = {
            let mut z = assemble_mass(spaces);
            z.values.fill(0.0);
            z
        };
        let values = vec![0.0; pattern.nnz];
        Ok(EnsembleSolver {
            spaces,
            ops,
            physics,
            theta,
            pattern,
            symbolic,
            convection,
            values,
        })
    }

    pub fn n_system(&self) -> usize {
        self.pattern.n_sys
    }

    fn step_context(&self, state: &EnsembleState, k_n: f64) -> Result<StepContext, NseError> {
        let steps = StepPair::new(k_n, state.k_nm1)?;
        let coeffs = coefficients(self.theta, steps);
        let t_np1 = state.t_n + k_n;
        let t_nm1 = state.t_n - state.k_nm1;
        let t_beta = coeffs.beta[0] * t_nm1 + coeffs.beta[1] * state.t_n + coeffs.beta[2] * t_np1;
        let nvel = self.spaces.n_velocity();
        let mut star = Vec::with_capacity(state.j());
        for m in &state.members {
            let mut s = vec![0.0; nvel];
            for i in 0..nvel {
                s[i] = coeffs.star[1] * m.u_n[i] + coeffs.star[0] * m.u_nm1[i];
            }
            star.push(s);
        }
        let mut mean_star = vec![0.0; nvel];
        for s in &star {
            for i in 0..nvel {
                mean_star[i] += s[i];
            }
        }
        let inv = 1.0 / state.j() as f64;
        for v in &mut mean_star {
            *v *= inv;
        }
        Ok(StepContext {
            coeffs,
            t_np1,
            t_beta,
            mean_star,
            star,
        })
    }

    /// Dirichlet lift: boundary nodes carry the member's boundary data at
    /// time `t`, free nodes are zero.
    fn boundary_lift(&self, member: usize, t: f64) -> Vec<f64> {
        let mut lift = vec![0.0; self.spaces.n_velocity()];
        for (s, xy) in self.spaces.node_coords.iter().enumerate() {
            if self.spaces.dirichlet[s] {
                let g = (self.physics.boundary)(member, xy[0], xy[1], t);
                lift[2 * s] = g[0];
                lift[2 * s + 1] = g[1];
            }
        }
        lift
    }

    /// Fills the saddle-matrix values from per-step block coefficients:
    /// `A = cm M + ck K + cn N(w)` on both components, `b_scale B` in the
    /// continuity block, `-B^T` in the gradient block.
    fn fill_saddle_values(&mut self, cm: f64, ck: f64, cn: f64, b_scale: f64) {
        let mass = &self.ops.mass.values;
        let stiff = &self.ops.stiffness.values;
        let conv = &self.convection.values;
        let div = &self.ops.divergence.values;
        let pint = &self.ops.pressure_integral;
        self.values.fill(0.0);
        for &(e, slot) in &self.pattern.a_slots {
            self.values[slot] = cm * mass[e] + ck * stiff[e] + cn * conv[e];
        }
        for &(e, slot) in &self.pattern.b_slots {
            self.values[slot] = b_scale * div[e];
        }
        for &(e, slot) in &self.pattern.bt_slots {
            self.values[slot] = -div[e];
        }
        for &(q, slot) in &self.pattern.mult_slots {
            self.values[slot] = pint[q];
        }
    }

    /// System right-hand side for one member:
    /// momentum `load - fluct - M vm - K vk - N vn` reduced to free dofs,
    /// continuity `-B rhs_continuity_vec`, multiplier row zero.
    #[allow(clippy::too_many_arguments)]
    fn member_rhs(
        &self,
        member: usize,
        ctx: &StepContext,
        vm: &[f64],
        vk: &[f64],
        vn: &[f64],
        fluct_transport: &[f64],
        rhs_continuity_vec: &[f64],
    ) -> Vec<f64> {
        let nvel = self.spaces.n_velocity();
        let t_beta = ctx.t_beta;
        let mut r = assemble_load(self.spaces, |x, y| {
            (self.physics.forcing)(member, x, y, t_beta)
        });
        let fluct = convection_apply(self.spaces, fluct_transport, &ctx.star[member]);
        let mut tmp = vec![0.0; nvel];
        self.ops.mass.apply_interleaved2(vm, &mut tmp);
        for i in 0..nvel {
            r[i] -= fluct[i] + tmp[i];
        }
        self.ops.stiffness.apply_interleaved2(vk, &mut tmp);
        for i in 0..nvel {
            r[i] -= tmp[i];
        }
        self.convection.apply_interleaved2(vn, &mut tmp);
        for i in 0..nvel {
            r[i] -= tmp[i];
        }

        let nu_free = 2 * self.spaces.n_free_scalar();
        let np = self.spaces.n_pressure;
        let mut rhs = vec![0.0; self.pattern.n_sys];
        for (fi, &node) in self.spaces.free_nodes.iter().enumerate() {
            rhs[2 * fi] = r[2 * node];
            rhs[2 * fi + 1] = r[2 * node + 1];
        }
        let bc = self.ops.divergence.matvec(rhs_continuity_vec);
        for q in 0..np {
            rhs[nu_free + q] = -bc[q];
        }
        rhs
    }

    /// Extracts `(u_np1, p_np1)` from a solved column. `beta_unknown` says
    /// whether the velocity unknown was the beta blend (refactorized path)
    /// or the new level itself (direct path).
    fn unpack_solution(
        &self,
        ctx: &StepContext,
        state: &EnsembleState,
        member: usize,
        x: &[f64],
        lift_np1: &[f64],
        beta_unknown: bool,
    ) -> Result<(Vec<f64>, Vec<f64>), NseError> {
        let c = &ctx.coeffs;
        let nu_free = 2 * self.spaces.n_free_scalar();
        let st = &state.members[member];

        let mut u_new = lift_np1.to_vec();
        for (fi, &node) in self.spaces.free_nodes.iter().enumerate() {
            for comp in 0..2 {
                let i = 2 * node + comp;
                let xv = x[2 * fi + comp];
                u_new[i] = if beta_unknown {
                    (xv - c.beta[1] * st.u_n[i] - c.beta[0] * st.u_nm1[i]) / c.beta[2]
                } else {
                    xv
                };
            }
        }

        // Pressure unknown is the blend in both paths.
        let mut p_new = vec![0.0; self.spaces.n_pressure];
        for q in 0..self.spaces.n_pressure {
            let pb = x[nu_free + q];
            p_new[q] = (pb - c.beta[1] * st.p_n[q] - c.beta[0] * st.p_nm1[q]) / c.beta[2];
        }

        for v in u_new.iter().chain(&p_new) {
            if !v.is_finite() {
                return Err(NseError::Instability {
                    member,
                    t: ctx.t_np1,
                });
            }
        }
        Ok((u_new, p_new))
    }

    /// One shared-matrix step of the ensemble; returns the advanced state and
    /// instrumentation. `path` selects the direct or refactorized realization.
    pub fn step(
        &mut self,
        state: &EnsembleState,
        k_n: f64,
        path: StepPath,
    ) -> Result<(EnsembleState, StepDiagnostics), NseError> {
        let ctx = self.step_context(state, k_n)?;
        let c = ctx.coeffs;
        let j = state.j();
        let nvel = self.spaces.n_velocity();

        let t_assembly = Instant::now();
        assemble_convection_into(self.spaces, &ctx.mean_star, &mut self.convection);
        let (cm, ck, cn, b_scale) = match path {
            StepPath::Direct => (
                c.alpha[2] / c.khat,
                self.physics.nu * c.beta[2],
                c.beta[2],
                c.beta[2],
            ),
            StepPath::Refactorized => (1.0 / c.k_be(), self.physics.nu, 1.0, 1.0),
        };
        self.fill_saddle_values(cm, ck, cn, b_scale);

        let mut rhs_cols = Vec::with_capacity(j);
        let mut lifts = Vec::with_capacity(j);
        for m in 0..j {
            let st = &state.members[m];
            let lift_np1 = self.boundary_lift(m, ctx.t_np1);
            let mut fluct_transport = vec![0.0; nvel];
            for i in 0..nvel {
                fluct_transport[i] = ctx.star[m][i] - ctx.mean_star[i];
            }
            let rhs = match path {
                StepPath::Direct => {
                    let mut vm = vec![0.0; nvel];
                    let mut vkn = vec![0.0; nvel];
                    for i in 0..nvel {
                        vm[i] = (c.alpha[1] * st.u_n[i]
                            + c.alpha[0] * st.u_nm1[i]
                            + c.alpha[2] * lift_np1[i])
                            / c.khat;
                        vkn[i] = c.beta[1] * st.u_n[i]
                            + c.beta[0] * st.u_nm1[i]
                            + c.beta[2] * lift_np1[i];
                    }
                    let vk: Vec<f64> = vkn.iter().map(|v| self.physics.nu * v).collect();
                    self.member_rhs(m, &ctx, &vm, &vk, &vkn, &fluct_transport, &vkn)
                }
                StepPath::Refactorized => {
                    // Pre-filter: BE start value and blend boundary lift.
                    let (w_n, w_nm1) = c.prefilter();
                    let k_be = c.k_be();
                    let mut lift_be = vec![0.0; nvel];
                    let mut vm = vec![0.0; nvel];
                    for i in 0..nvel {
                        let old = w_n * st.u_n[i] + w_nm1 * st.u_nm1[i];
                        lift_be[i] = if self.spaces.dirichlet[i / 2] {
                            c.beta[2] * lift_np1[i]
                                + c.beta[1] * st.u_n[i]
                                + c.beta[0] * st.u_nm1[i]
                        } else {
                            0.0
                        };
                        vm[i] = (lift_be[i] - old) / k_be;
                    }
                    let vk: Vec<f64> = lift_be.iter().map(|v| self.physics.nu * v).collect();
                    self.member_rhs(m, &ctx, &vm, &vk, &lift_be, &fluct_transport, &lift_be)
                }
            };
            rhs_cols.push(rhs);
            lifts.push(lift_np1);
        }
        let assembly_time = t_assembly.elapsed();

        let t_factor = Instant::now();
        let factorization = self.symbolic.factor(&self.values)?;
        let factor_time = t_factor.elapsed();

        let t_solve = Instant::now();
        let solutions = factorization.solve_many(&rhs_cols);
        let solve_time = t_solve.elapsed();

        let beta_unknown = matches!(path, StepPath::Refactorized);
        let mut members = Vec::with_capacity(j);
        let mut div_residual = 0.0f64;
        for m in 0..j {
            let (u_new, p_new) =
                self.unpack_solution(&ctx, state, m, &solutions[m], &lifts[m], beta_unknown)?;
            let st = &state.members[m];
            let mut u_beta = vec![0.0; nvel];
            for i in 0..nvel {
                u_beta[i] =
                    c.beta[2] * u_new[i] + c.beta[1] * st.u_n[i] + c.beta[0] * st.u_nm1[i];
            }
            div_residual = div_residual.max(self.ops.divergence_residual(&u_beta));
            members.push(MemberState {
                u_nm1: st.u_n.clone(),
                u_n: u_new,
                p_nm1: st.p_n.clone(),
                p_n: p_new,
            });
        }

        let cfl = cfl_indicator(state, &c, &self.ops, self.physics.nu, self.spaces.mesh.h())?;
        Ok((
            EnsembleState {
                t_n: ctx.t_np1,
                k_nm1: k_n,
                members,
            },
            StepDiagnostics {
                factorizations: 1,
                solves: j as u64,
                cfl,
                divergence_residual: div_residual,
                assembly_time,
                factor_time,
                solve_time,
            },
        ))
    }

    /// Standalone semi-implicit DLN step for a single system: transport is
    /// the member's own star blend and no fluctuation term exists. This is
    /// the independent reference the J = 1 ensemble step must reproduce.
    pub fn semi_implicit_step(
        &mut self,
        state: &EnsembleState,
        k_n: f64,
    ) -> Result<EnsembleState, NseError> {
        assert_eq!(state.j(), 1, "standalone path solves one system");
        let ctx = self.step_context(state, k_n)?;
        let c = ctx.coeffs;
        let nvel = self.spaces.n_velocity();
        let st = &state.members[0];

        assemble_convection_into(self.spaces, &ctx.star[0], &mut self.convection);
        self.fill_saddle_values(
            c.alpha[2] / c.khat,
            self.physics.nu * c.beta[2],
            c.beta[2],
            c.beta[2],
        );

        let lift_np1 = self.boundary_lift(0, ctx.t_np1);
        let mut vm = vec![0.0; nvel];
        let mut vkn = vec![0.0; nvel];
        for i in 0..nvel {
            vm[i] = (c.alpha[1] * st.u_n[i] + c.alpha[0] * st.u_nm1[i]
                + c.alpha[2] * lift_np1[i])
                / c.khat;
            vkn[i] =
                c.beta[1] * st.u_n[i] + c.beta[0] * st.u_nm1[i] + c.beta[2] * lift_np1[i];
        }
        let vk: Vec<f64> = vkn.iter().map(|v| self.physics.nu * v).collect();
        let zero_fluct = vec![0.0; nvel];
        let rhs = self.member_rhs(0, &ctx, &vm, &vk, &vkn, &zero_fluct, &vkn);
        let factorization = self.symbolic.factor(&self.values)?;
        let x = factorization.solve(&rhs);
        let (u_new, p_new) = self.unpack_solution(&ctx, state, 0, &x, &lift_np1, false)?;
        Ok(EnsembleState {
            t_n: ctx.t_np1,
            k_nm1: k_n,
            members: vec![MemberState {
                u_nm1: st.u_n.clone(),
                u_n: u_new,
                p_nm1: st.p_n.clone(),
                p_n: p_new,
            }],
        })
    }
}

/// One committed level of an adaptive or constant-step run.
#[derive(Debug, Clone)]
pub struct EnergyRow {
    pub t: f64,
    pub k: f64,
    pub estimate: f64,
    pub energy_avg: f64,
    pub energy_max: f64,
    pub viscous_avg: f64,
    pub viscous_max: f64,
    pub numerical_avg: f64,
    pub numerical_max: f64,
    pub cfl_max: f64,
}

/// Energy diagnostics of a freshly committed level. The dissipation triple is
/// `[u_nm1, u_n]` of the previous state plus the new level per member.
pub fn energy_row(
    ops: &Operators,
    nu: f64,
    coeffs: &DlnCoefficients,
    previous: &EnsembleState,
    next: &EnsembleState,
    estimate: f64,
    cfl_max: f64,
) -> EnergyRow {
    let j = next.j() as f64;
    let mut e_avg = 0.0;
    let mut e_max = 0.0f64;
    let mut vd_avg = 0.0;
    let mut vd_max = 0.0f64;
    let mut nd_avg = 0.0;
    let mut nd_max = 0.0f64;
    for (prev_m, next_m) in previous.members.iter().zip(&next.members) {
        let e = kinetic_energy(ops, &next_m.u_n);
        let vd = viscous_dissipation(ops, nu, &next_m.u_n);
        let nd = numerical_dissipation(ops, coeffs, &prev_m.u_nm1, &prev_m.u_n, &next_m.u_n);
        e_avg += e;
        e_max = e_max.max(e);
        vd_avg += vd;
        vd_max = vd_max.max(vd);
        nd_avg += nd;
        nd_max = nd_max.max(nd);
    }
    EnergyRow {
        t: next.t_n,
        k: next.k_nm1,
        estimate,
        energy_avg: e_avg / j,
        energy_max: e_max,
        viscous_avg: vd_avg / j,
        viscous_max: vd_max,
        numerical_avg: nd_avg / j,
        numerical_max: nd_max,
        cfl_max,
    }
}

/// Rolling four-level history driving the ensemble through the accept/reject
/// loop. Velocity levels are kept full (with boundary values) so the
/// AB2-like predictor and the estimator see the same vectors the solver
/// produces.
pub struct AdaptiveEnsemble<'a> {
    pub solver: EnsembleSolver<'a>,
    pub path: StepPath,
    times: Vec<f64>,
    levels: Vec<Vec<Vec<f64>>>,
    state: EnsembleState,
    pending: Option<(EnsembleState, StepDiagnostics, f64, f64)>,
    pub trace: Vec<EnergyRow>,
    pub factorizations: u64,
    pub solves: u64,
    /// Called on every committed step with `(previous, next, k)`.
    pub observer: Option<Box<dyn FnMut(&EnsembleState, &EnsembleState, f64) + 'a>>,
}

impl<'a> AdaptiveEnsemble<'a> {
    pub fn new(solver: EnsembleSolver<'a>, initial: EnsembleState) -> Self {
        let t0 = initial.t_n - initial.k_nm1;
        let times = vec![t0, initial.t_n];
        let levels = vec![
            initial.members.iter().map(|m| m.u_nm1.clone()).collect(),
            initial.members.iter().map(|m| m.u_n.clone()).collect(),
        ];
        AdaptiveEnsemble {
            solver,
            path: StepPath::Refactorized,
            times,
            levels,
            state: initial,
            pending: None,
            trace: Vec::new(),
            factorizations: 0,
            solves: 0,
            observer: None,
        }
    }

    pub fn state(&self) -> &EnsembleState {
        &self.state
    }

    fn estimate_pending(
        &self,
        candidate: &EnsembleState,
        k: f64,
    ) -> Result<Option<LteEstimate>, NseError> {
        if self.times.len() < 4 {
            return Ok(None);
        }
        let n = self.times.len();
        let t = [
            self.times[n - 4],
            self.times[n - 3],
            self.times[n - 2],
            self.times[n - 1],
        ];
        let t_np1 = self.state.t_n + k;
        let theta = self.solver.theta;

        let k_nm1 = t[3] - t[2];
        let k_nm2 = t[2] - t[1];
        let k_nm3 = t[1] - t[0];
        let coeffs_n = coefficients(theta, StepPair::new(k, k_nm1)?);
        let coeffs_nm1 = coefficients(theta, StepPair::new(k_nm1, k_nm2)?);
        let coeffs_nm2 = coefficients(theta, StepPair::new(k_nm2, k_nm3)?);
        let g = g_coefficient(&coeffs_n, k / k_nm1)?;
        let r = r_coefficient(
            &coeffs_nm1,
            &coeffs_nm2,
            [k / k_nm1, k_nm1 / k_nm2, k_nm2 / k_nm3],
        )?;

        let j = self.state.j();
        let mut y_dln = Vec::with_capacity(j);
        let mut y_ab2 = Vec::with_capacity(j);
        for m in 0..j {
            let pred = ab2_like_predict(
                [
                    &self.levels[n - 4][m],
                    &self.levels[n - 3][m],
                    &self.levels[n - 2][m],
                    &self.levels[n - 1][m],
                ],
                t,
                t_np1,
                theta,
            )?;
            y_ab2.push(pred);
            y_dln.push(candidate.members[m].u_n.clone());
        }
        let ops = &self.solver.ops;
        let est = lte_estimate(&y_dln, &y_ab2, g, r, |v| ops.velocity_l2(v))?;
        Ok(Some(est))
    }
}

impl<'a> AdaptiveStepper for AdaptiveEnsemble<'a> {
    type Error = NseError;

    fn time(&self) -> f64 {
        self.state.t_n
    }

    fn attempt(&mut self, k: f64) -> Result<Option<LteEstimate>, NseError> {
        let (candidate, diag) = self.solver.step(&self.state, k, self.path)?;
        let est = self.estimate_pending(&candidate, k)?;
        let est_value = est.as_ref().map(|e| e.value).unwrap_or(f64::NAN);
        self.pending = Some((candidate, diag, est_value, k));
        Ok(est)
    }

    fn commit(&mut self) {
        let (candidate, diag, est_value, k) =
            self.pending.take().expect("commit without attempt");
        self.factorizations += diag.factorizations;
        self.solves += diag.solves;

        let coeffs = coefficients(
            self.solver.theta,
            StepPair::new(k, self.state.k_nm1).expect("steps positive"),
        );
        self.trace.push(energy_row(
            &self.solver.ops,
            self.solver.physics.nu,
            &coeffs,
            &self.state,
            &candidate,
            est_value,
            diag.cfl.max(),
        ));
        if let Some(obs) = self.observer.as_mut() {
            obs(&self.state, &candidate, k);
        }

        self.times.push(candidate.t_n);
        self.levels
            .push(candidate.members.iter().map(|m| m.u_n.clone()).collect());
        if self.times.len() > 4 {
            self.times.remove(0);
            self.levels.remove(0);
        }
        self.state = candidate;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::build_spaces;
    use approx::assert_relative_eq;

    fn zero_state(spaces: &FeSpaces, j: usize) -> EnsembleState {
        initialize_from_exact(spaces, j, |_, _, _, _| [0.0, 0.0], |_, _, _, _| 0.0, 0.0, 0.01)
    }

    #[test]
    fn zero_data_zero_forcing_stays_zero() {
        let spaces = build_spaces(4).unwrap();
        let physics = NsePhysics::homogeneous(0.01, |_, _, _, _| [0.0, 0.0]);
        let mut solver = EnsembleSolver::new(&spaces, physics, Theta::two_thirds()).unwrap();
        let state = zero_state(&spaces, 2);
        let (next, diag) = solver.step(&state, 0.01, StepPath::Direct).unwrap();
        for m in &next.members {
            assert!(m.u_n.iter().all(|&v| v.abs() <= 1e-12));
            assert!(m.p_n.iter().all(|&v| v.abs() <= 1e-10));
        }
        assert_eq!(diag.factorizations, 1);
        assert_eq!(diag.solves, 2);
    }

    #[test]
    fn identical_members_stay_identical_and_match_j1() {
        let spaces = build_spaces(4).unwrap();
        let pi = std::f64::consts::PI;
        let force = move |_m: usize, x: f64, y: f64, t: f64| {
            [
                (pi * x).sin() * (pi * y).cos() * (1.0 + t),
                (pi * x).cos() * (pi * y).sin() * (1.0 - t),
            ]
        };
        let init_v = |_m: usize, x: f64, y: f64, _t: f64| {
            let s = (pi * x).sin() * (pi * y).sin();
            [s * 0.1, -s * 0.1]
        };

        let run = |j: usize| {
            let physics = NsePhysics::homogeneous(0.05, force);
            let mut solver =
                EnsembleSolver::new(&spaces, physics, Theta::two_thirds()).unwrap();
            let mut state =
                initialize_from_exact(&spaces, j, init_v, |_, _, _, _| 0.0, 0.0, 0.01);
            for _ in 0..3 {
                let (next, _) = solver.step(&state, 0.01, StepPath::Direct).unwrap();
                state = next;
            }
            state
        };

        let s1 = run(1);
        let s2 = run(2);
        let scale: f64 = s1.members[0]
            .u_n
            .iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max)
            .max(1e-30);
        for i in 0..s2.members[0].u_n.len() {
            let d01 = (s2.members[0].u_n[i] - s2.members[1].u_n[i]).abs();
            assert!(d01 <= 1e-12 * scale, "members diverged: {d01}");
            let dj = (s2.members[0].u_n[i] - s1.members[0].u_n[i]).abs();
            assert!(dj <= 1e-12 * scale, "J=2 differs from J=1: {dj}");
        }
    }

    #[test]
    fn member_swap_is_equivariant() {
        let spaces = build_spaces(3).unwrap();
        let pi = std::f64::consts::PI;
        let init_v = move |m: usize, x: f64, y: f64, _t: f64| {
            let s = (pi * x).sin() * (pi * y).sin();
            let a = 1.0 + 0.05 * m as f64;
            [a * s, -a * s * 0.5]
        };
        let physics = NsePhysics::homogeneous(0.05, |_, _, _, _| [0.1, -0.2]);
        let mut solver = EnsembleSolver::new(&spaces, physics, Theta::two_thirds()).unwrap();
        let state = initialize_from_exact(&spaces, 2, init_v, |_, _, _, _| 0.0, 0.0, 0.01);
        let mut swapped = state.clone();
        swapped.members.swap(0, 1);
        let (next, _) = solver.step(&state, 0.01, StepPath::Direct).unwrap();
        let (next_swapped, _) = solver.step(&swapped, 0.01, StepPath::Direct).unwrap();
        for i in 0..next.members[0].u_n.len() {
            assert_eq!(next.members[0].u_n[i], next_swapped.members[1].u_n[i]);
            assert_eq!(next.members[1].u_n[i], next_swapped.members[0].u_n[i]);
        }
    }

    #[test]
    fn mean_star_trivial_cases() {
        let spaces = build_spaces(3).unwrap();
        let pi = std::f64::consts::PI;
        let init_v = move |m: usize, x: f64, y: f64, t: f64| {
            let s = (pi * x).sin() * (pi * y).sin() * (1.0 + t);
            [(1.0 + 0.1 * m as f64) * s, -s]
        };
        let state = initialize_from_exact(&spaces, 2, init_v, |_, _, _, _| 0.0, 0.0, 0.01);
        let c = coefficients(
            Theta::two_thirds(),
            StepPair::new(0.02, state.k_nm1).unwrap(),
        );
        let mean = ensemble_mean_star(&state, &c);
        // Mean of blends equals blend of means.
        for i in 0..mean.len() {
            let star0 =
                c.star[1] * state.members[0].u_n[i] + c.star[0] * state.members[0].u_nm1[i];
            let star1 =
                c.star[1] * state.members[1].u_n[i] + c.star[0] * state.members[1].u_nm1[i];
            assert_relative_eq!(mean[i], 0.5 * (star0 + star1), max_relative = 1e-13, epsilon = 1e-15);
        }
        // Single member: mean is that member's blend.
        let one = EnsembleState {
            t_n: state.t_n,
            k_nm1: state.k_nm1,
            members: vec![state.members[0].clone()],
        };
        let m1 = ensemble_mean_star(&one, &c);
        for i in 0..m1.len() {
            let star0 =
                c.star[1] * state.members[0].u_n[i] + c.star[0] * state.members[0].u_nm1[i];
            assert_eq!(m1[i], star0);
        }
    }

    #[test]
    fn cfl_indicator_zero_for_identical_members_and_j1() {
        let spaces = build_spaces(3).unwrap();
        let ops = assemble_operators(&spaces);
        let pi = std::f64::consts::PI;
        let init_v = move |_m: usize, x: f64, y: f64, _t: f64| {
            [(pi * x).sin(), (pi * y).cos()]
        };
        let state = initialize_from_exact(&spaces, 3, init_v, |_, _, _, _| 0.0, 0.0, 0.01);
        let c = coefficients(Theta::two_thirds(), StepPair::new(0.01, 0.01).unwrap());
        let cfl = cfl_indicator(&state, &c, &ops, 0.01, spaces.mesh.h()).unwrap();
        assert!(cfl.max() <= 1e-20);
        assert_relative_eq!(cfl.ratio_factor, 1.0);
    }

    #[test]
    fn refactorized_matches_direct_path() {
        let spaces = build_spaces(4).unwrap();
        let pi = std::f64::consts::PI;
        let force = move |m: usize, x: f64, y: f64, t: f64| {
            let a = 1.0 + 0.01 * m as f64;
            [
                a * (pi * x).sin() * (pi * y).cos() * (1.0 + t),
                -a * (pi * x).cos() * (pi * y).sin(),
            ]
        };
        let init_v = move |m: usize, x: f64, y: f64, _t: f64| {
            let s = (pi * x).sin() * (pi * y).sin();
            let a = 1.0 + 0.01 * m as f64;
            [a * s * 0.2, -a * s * 0.1]
        };
        fn mk_solver<'a>(
            spaces: &'a FeSpaces,
            force: impl Fn(usize, f64, f64, f64) -> [f64; 2] + Send + Sync + 'static,
        ) -> EnsembleSolver<'a> {
            EnsembleSolver::new(
                spaces,
                NsePhysics::homogeneous(0.02, force),
                Theta::two_over_sqrt5(),
            )
            .unwrap()
        }
        let initial = initialize_from_exact(&spaces, 3, init_v, |_, _, _, _| 0.0, 0.0, 0.008);

        let mut sd = mk_solver(&spaces, force);
        let mut sr = mk_solver(&spaces, force);
        let mut state_d = initial.clone();
        let mut state_r = initial;
        // Uneven step sequence exercises the variable-step filters.
        for &k in &[0.01, 0.013, 0.009] {
            let (nd, _) = sd.step(&state_d, k, StepPath::Direct).unwrap();
            let (nr, _) = sr.step(&state_r, k, StepPath::Refactorized).unwrap();
            let scale: f64 = nd.members[0]
                .u_n
                .iter()
                .map(|v| v.abs())
                .fold(0.0, f64::max)
                .max(1e-30);
            for (md, mr) in nd.members.iter().zip(&nr.members) {
                for (a, b) in md.u_n.iter().zip(&mr.u_n) {
                    assert!((a - b).abs() <= 1e-11 * scale, "velocity gap {}", (a - b).abs());
                }
                for (a, b) in md.p_n.iter().zip(&mr.p_n) {
                    assert!((a - b).abs() <= 1e-9 * scale.max(1.0), "pressure gap {}", (a - b).abs());
                }
            }
            state_d = nd;
            state_r = nr;
        }
    }

    #[test]
    fn incompressibility_of_beta_blend_with_homogeneous_data() {
        let spaces = build_spaces(4).unwrap();
        let pi = std::f64::consts::PI;
        // Divergence-free initial data vanishing on the boundary.
        let init_v = move |_m: usize, x: f64, y: f64, _t: f64| {
            let sx = (pi * x).sin();
            let sy = (pi * y).sin();
            [
                2.0 * pi * sx * sx * sy * (pi * y).cos(),
                -2.0 * pi * sx * (pi * x).cos() * sy * sy,
            ]
        };
        let physics = NsePhysics::homogeneous(0.05, |_, _, _, _| [0.0, 0.0]);
        let mut solver = EnsembleSolver::new(&spaces, physics, Theta::two_thirds()).unwrap();
        let mut state = initialize_from_exact(&spaces, 2, init_v, |_, _, _, _| 0.0, 0.0, 0.01);
        for _ in 0..3 {
            let (next, diag) = solver.step(&state, 0.012, StepPath::Direct).unwrap();
            assert!(
                diag.divergence_residual <= 1e-9,
                "divergence residual {}",
                diag.divergence_residual
            );
            state = next;
        }
    }

    #[test]
    fn energy_ledger_balances_weak_form() {
        // Homogeneous decay run: testing against the G-identity split of the
        // discrete energy equation with v = u_beta.
        let spaces = build_spaces(4).unwrap();
        let pi = std::f64::consts::PI;
        let init_v = move |_m: usize, x: f64, y: f64, _t: f64| {
            let sx = (pi * x).sin();
            let sy = (pi * y).sin();
            [
                2.0 * pi * sx * sx * sy * (pi * y).cos(),
                -2.0 * pi * sx * (pi * x).cos() * sy * sy,
            ]
        };
        let nu = 0.05;
        let physics = NsePhysics::homogeneous(nu, |_, _, _, _| [0.0, 0.0]);
        let theta = Theta::two_thirds();
        let mut solver = EnsembleSolver::new(&spaces, physics, theta).unwrap();
        let mut state = initialize_from_exact(&spaces, 2, init_v, |_, _, _, _| 0.0, 0.0, 0.01);
        let ops = assemble_operators(&spaces);
        for step in 0..3 {
            let k = 0.01 + 0.002 * step as f64;
            let c = coefficients(theta, StepPair::new(k, state.k_nm1).unwrap());
            let mean = ensemble_mean_star(&state, &c);
            let (next, _) = solver.step(&state, k, StepPath::Direct).unwrap();
            for (m_old, m_new) in state.members.iter().zip(&next.members) {
                let nvel = m_new.u_n.len();
                let mut u_beta = vec![0.0; nvel];
                let mut star = vec![0.0; nvel];
                for i in 0..nvel {
                    u_beta[i] = c.beta[2] * m_new.u_n[i]
                        + c.beta[1] * m_old.u_n[i]
                        + c.beta[0] * m_old.u_nm1[i];
                    star[i] = c.star[1] * m_old.u_n[i] + c.star[0] * m_old.u_nm1[i];
                }
                let fluct: Vec<f64> = star.iter().zip(&mean).map(|(a, b)| a - b).collect();
                // G-identity route for (z_alpha, z_beta)/khat, mass-weighted.
                let gm_new = 0.25 * (1.0 + theta.value())
                    * ops.mass.bilinear_interleaved2(&m_new.u_n, &m_new.u_n)
                    + 0.25 * (1.0 - theta.value())
                        * ops.mass.bilinear_interleaved2(&m_old.u_n, &m_old.u_n);
                let gm_old = 0.25 * (1.0 + theta.value())
                    * ops.mass.bilinear_interleaved2(&m_old.u_n, &m_old.u_n)
                    + 0.25 * (1.0 - theta.value())
                        * ops.mass.bilinear_interleaved2(&m_old.u_nm1, &m_old.u_nm1);
                let zg = blend_gamma([&m_old.u_nm1, &m_old.u_n, &m_new.u_n], &c).unwrap();
                let diss = ops.mass.bilinear_interleaved2(&zg, &zg);
                let grad = ops.stiffness.bilinear_interleaved2(&u_beta, &u_beta);
                let convect = crate::fem::trilinear_b(&spaces, &fluct, &star, &u_beta);
                let balance = (gm_new - gm_old + diss) / c.khat + nu * grad + convect;
                let scale = (gm_new.abs() + gm_old.abs()) / c.khat + nu * grad.abs() + 1.0;
                assert!(
                    balance.abs() <= 1e-10 * scale,
                    "ledger imbalance {balance:.3e} at scale {scale:.3e}"
                );
            }
            state = next;
        }
    }
}
