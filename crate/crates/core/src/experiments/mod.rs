//! Experiment harness behind the CLI: manufactured-solution convergence
//! sweeps, shared-factorization efficiency scaling in J, and the adaptive
//! stiff runs with their matched constant-step comparisons. Every runner is
//! deterministic for a fixed seed and writes one CSV per table/figure analog
//! when an output directory is configured.

pub mod manufactured;
pub mod report;

use std::cell::RefCell;
use std::path::PathBuf;
use std::rc::Rc;

use thiserror::Error;

use crate::adaptivity::{adaptive_loop, AdaptiveConfig, RunReport, StepRecord};
use crate::dln::{coefficients, StepPair, Theta};
use crate::ensemble::{
    energy_row, initialize_from_exact, AdaptiveEnsemble, EnergyRow, EnsembleSolver,
    NseError, NsePhysics, StepPath,
};
use crate::fem::{
    build_spaces, pressure_error_l2, velocity_error_norms, FeSpaces, FemError,
};

pub use manufactured::{
    lindberg_time_factor, ManufacturedError, ManufacturedSolution, PerturbationSet, TimeFactor,
};
pub use report::{rate, write_csv, ErrorReport, MemberErrors};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Nse(#[from] NseError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Manufactured(#[from] ManufacturedError),
    #[error(transparent)]
    Dln(#[from] crate::dln::DlnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("configuration: {0}")]
    BadConfig(String),
}

fn physics_from(sol: &ManufacturedSolution) -> NsePhysics {
    let forcing = sol.clone();
    let boundary = sol.clone();
    NsePhysics::new(
        sol.nu,
        move |m, x, y, t| forcing.forcing(m, x, y, t),
        move |m, x, y, t| boundary.velocity(m, x, y, t),
    )
}

/// Running per-member error maxima and pressure-sum accumulation.
struct ErrorAccumulator {
    inf_l2: Vec<f64>,
    inf_h1: Vec<f64>,
    p_sq: Vec<f64>,
}

impl ErrorAccumulator {
    fn new(j: usize) -> Self {
        ErrorAccumulator {
            inf_l2: vec![0.0; j],
            inf_h1: vec![0.0; j],
            p_sq: vec![0.0; j],
        }
    }

    /// Records a solution level at time `t`; `p_weight` multiplies the squared
    /// pressure error added for this sample (zero skips the pressure term).
    fn record_level(
        &mut self,
        spaces: &FeSpaces,
        sol: &ManufacturedSolution,
        member: usize,
        u: &[f64],
        p: Option<&[f64]>,
        t: f64,
        p_weight: f64,
    ) {
        let (l2, h1) = velocity_error_norms(
            spaces,
            u,
            &|x, y| sol.velocity(member, x, y, t),
            &|x, y| sol.velocity_gradient(member, x, y, t),
        );
        self.inf_l2[member] = self.inf_l2[member].max(l2);
        self.inf_h1[member] = self.inf_h1[member].max(h1);
        if let Some(p_h) = p {
            if p_weight > 0.0 {
                let pe = pressure_error_l2(spaces, p_h, &|x, y| sol.pressure(x, y, t));
                self.p_sq[member] += p_weight * pe * pe;
            }
        }
    }

    fn finish(self) -> ErrorReport {
        ErrorReport {
            members: (0..self.inf_l2.len())
                .map(|m| MemberErrors {
                    velocity_inf_l2: self.inf_l2[m],
                    velocity_inf_h1: self.inf_h1[m],
                    pressure_l2: self.p_sq[m].sqrt(),
                })
                .collect(),
        }
    }
}

/// Outcome of one constant-step run (possibly aborted by instability).
pub struct ConstantRunOutcome {
    pub trace: Vec<EnergyRow>,
    pub errors: ErrorReport,
    pub steps_taken: u64,
    pub completed: bool,
    pub abort: Option<String>,
    pub factorizations: u64,
    pub solves: u64,
    pub assembly_s: f64,
    pub factor_s: f64,
    pub solve_s: f64,
}

/// Drives `n_steps` computed steps of size `k` from exact data at `t0`.
#[allow(clippy::too_many_arguments)]
pub fn constant_run(
    spaces: &FeSpaces,
    sol: &ManufacturedSolution,
    theta: Theta,
    path: StepPath,
    t0: f64,
    k: f64,
    n_steps: u64,
    record_errors: bool,
) -> Result<ConstantRunOutcome, ExperimentError> {
    let j = sol.deltas.len();
    let mut solver = EnsembleSolver::new(spaces, physics_from(sol), theta)?;
    let mut state = initialize_from_exact(
        spaces,
        j,
        |m, x, y, t| sol.velocity(m, x, y, t),
        |_, x, y, t| sol.pressure(x, y, t),
        t0,
        k,
    );

    let mut acc = ErrorAccumulator::new(j);
    if record_errors {
        for (m, st) in state.members.iter().enumerate() {
            acc.record_level(spaces, sol, m, &st.u_nm1, Some(&st.p_nm1), t0, k);
            acc.record_level(spaces, sol, m, &st.u_n, Some(&st.p_n), t0 + k, k);
        }
    }

    let mut trace = Vec::new();
    let mut completed = true;
    let mut abort = None;
    let mut steps_taken = 0;
    let mut factorizations = 0;
    let mut solves = 0;
    let mut assembly_s = 0.0;
    let mut factor_s = 0.0;
    let mut solve_s = 0.0;
    for _ in 0..n_steps {
        let coeffs = coefficients(theta, StepPair::new(k, state.k_nm1)?);
        match solver.step(&state, k, path) {
            Ok((next, diag)) => {
                steps_taken += 1;
                factorizations += diag.factorizations;
                solves += diag.solves;
                assembly_s += diag.assembly_time.as_secs_f64();
                factor_s += diag.factor_time.as_secs_f64();
                solve_s += diag.solve_time.as_secs_f64();
                trace.push(energy_row(
                    &solver.ops,
                    sol.nu,
                    &coeffs,
                    &state,
                    &next,
                    f64::NAN,
                    diag.cfl.max(),
                ));
                if record_errors {
                    for (m, st) in next.members.iter().enumerate() {
                        acc.record_level(spaces, sol, m, &st.u_n, Some(&st.p_n), next.t_n, k);
                    }
                }
                state = next;
            }
            Err(e) => {
                completed = false;
                abort = Some(e.to_string());
                break;
            }
        }
    }
    Ok(ConstantRunOutcome {
        trace,
        errors: acc.finish(),
        steps_taken,
        completed,
        abort,
        factorizations,
        solves,
        assembly_s,
        factor_s,
        solve_s,
    })
}

// ---------------------------------------------------------------------------
// Convergence sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ConvergenceConfig {
    pub theta: Theta,
    pub re: f64,
    pub omega: f64,
    pub meshes: Vec<usize>,
    pub j: usize,
    pub delta_bar: f64,
    pub seed: u64,
    pub t_final: f64,
    pub path: StepPath,
    pub out_dir: Option<PathBuf>,
}

impl ConvergenceConfig {
    /// Published setup: Re = 200, omega = 10, J = 10, deltas in 1e-2,
    /// constant step k = h/2 over [0, 1].
    pub fn paper(theta: Theta) -> Self {
        ConvergenceConfig {
            theta,
            re: 200.0,
            omega: 10.0,
            meshes: vec![8, 16, 32],
            j: 10,
            delta_bar: 1e-2,
            seed: 1,
            t_final: 1.0,
            path: StepPath::Refactorized,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvergenceRow {
    pub m: usize,
    pub h: f64,
    pub report: ErrorReport,
}

#[derive(Debug, Clone)]
pub struct ConvergenceResult {
    pub rows: Vec<ConvergenceRow>,
}

impl ConvergenceResult {
    /// Rates of the ensemble-average errors between consecutive meshes,
    /// ordered `[inf_l2, inf_h1, pressure]`.
    pub fn average_rates(&self) -> Vec<[f64; 3]> {
        self.rows
            .windows(2)
            .map(|w| {
                let a = w[0].report.average();
                let b = w[1].report.average();
                [
                    rate(a.velocity_inf_l2, b.velocity_inf_l2),
                    rate(a.velocity_inf_h1, b.velocity_inf_h1),
                    rate(a.pressure_l2, b.pressure_l2),
                ]
            })
            .collect()
    }
}

pub fn run_convergence(cfg: &ConvergenceConfig) -> Result<ConvergenceResult, ExperimentError> {
    if cfg.meshes.is_empty() {
        return Err(ExperimentError::BadConfig("no meshes given".into()));
    }
    let deltas = PerturbationSet::draw(cfg.j, cfg.delta_bar, cfg.seed);
    let nu = 1.0 / cfg.re;
    let sol = ManufacturedSolution::new(
        TimeFactor::SinOmega { omega: cfg.omega },
        nu,
        deltas.values.clone(),
    );

    let mut rows = Vec::new();
    for &m in &cfg.meshes {
        let spaces = build_spaces(m)?;
        let h = spaces.mesh.h();
        let k = 0.5 * h;
        let n_levels = (cfg.t_final / k).round() as u64;
        let outcome = constant_run(
            &spaces,
            &sol,
            cfg.theta,
            cfg.path,
            0.0,
            k,
            n_levels.saturating_sub(1),
            true,
        )?;
        if !outcome.completed {
            return Err(ExperimentError::BadConfig(format!(
                "convergence run unstable on mesh {m}: {:?}",
                outcome.abort
            )));
        }
        rows.push(ConvergenceRow {
            m,
            h,
            report: outcome.errors,
        });
    }
    let result = ConvergenceResult { rows };

    if let Some(dir) = &cfg.out_dir {
        let header = "block,h,err_inf_l2,rate_inf_l2,err_inf_h1,rate_inf_h1,err_p_l2,rate_p_l2";
        let mut lines = Vec::new();
        let blocks: [(&str, Box<dyn Fn(&ErrorReport) -> MemberErrors>); 4] = [
            ("member_first", Box::new(|r| r.members[0])),
            ("member_last", Box::new(|r| *r.members.last().unwrap())),
            ("average", Box::new(|r| r.average())),
            ("max", Box::new(|r| r.max())),
        ];
        for (name, pick) in &blocks {
            let mut prev: Option<MemberErrors> = None;
            for row in &result.rows {
                let e = pick(&row.report);
                let rates = prev
                    .map(|p| {
                        [
                            rate(p.velocity_inf_l2, e.velocity_inf_l2),
                            rate(p.velocity_inf_h1, e.velocity_inf_h1),
                            rate(p.pressure_l2, e.pressure_l2),
                        ]
                    })
                    .unwrap_or([f64::NAN; 3]);
                lines.push(format!(
                    "{},{:.6e},{:.6e},{:.4},{:.6e},{:.4},{:.6e},{:.4}",
                    name,
                    row.h,
                    e.velocity_inf_l2,
                    rates[0],
                    e.velocity_inf_h1,
                    rates[1],
                    e.pressure_l2,
                    rates[2]
                ));
                prev = Some(e);
            }
        }
        write_csv(&dir.join("convergence.csv"), header, lines)?;
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// Efficiency scaling in J
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EfficiencyConfig {
    pub theta: Theta,
    pub re: f64,
    pub omega: f64,
    pub mesh: usize,
    pub j_list: Vec<usize>,
    pub delta_bar: f64,
    pub seed: u64,
    pub t_final: f64,
    pub path: StepPath,
    pub out_dir: Option<PathBuf>,
}

impl EfficiencyConfig {
    /// Published setup: Re = 1000, omega = 10, h = 1/64, deltas in 0.1.
    pub fn paper(theta: Theta) -> Self {
        EfficiencyConfig {
            theta,
            re: 1000.0,
            omega: 10.0,
            mesh: 64,
            j_list: vec![1, 10, 100],
            delta_bar: 0.1,
            seed: 1,
            t_final: 1.0,
            path: StepPath::Refactorized,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EfficiencyRow {
    pub j: usize,
    pub steps: u64,
    pub factorizations: u64,
    pub solves: u64,
    pub assembly_s: f64,
    pub factor_s: f64,
    pub solve_s: f64,
    pub avg: MemberErrors,
    pub max: MemberErrors,
}

pub fn run_efficiency(cfg: &EfficiencyConfig) -> Result<Vec<EfficiencyRow>, ExperimentError> {
    let spaces = build_spaces(cfg.mesh)?;
    let h = spaces.mesh.h();
    let k = 0.5 * h;
    let n_levels = (cfg.t_final / k).round() as u64;
    let nu = 1.0 / cfg.re;

    let mut rows = Vec::new();
    for &j in &cfg.j_list {
        // The perturbation array is re-drawn for every ensemble size.
        let deltas = PerturbationSet::draw(j, cfg.delta_bar, cfg.seed ^ (j as u64) << 16);
        let sol = ManufacturedSolution::new(
            TimeFactor::SinOmega { omega: cfg.omega },
            nu,
            deltas.values.clone(),
        );
        let outcome = constant_run(
            &spaces,
            &sol,
            cfg.theta,
            cfg.path,
            0.0,
            k,
            n_levels.saturating_sub(1),
            true,
        )?;
        if !outcome.completed {
            return Err(ExperimentError::BadConfig(format!(
                "efficiency run unstable for J = {j}: {:?}",
                outcome.abort
            )));
        }
        rows.push(EfficiencyRow {
            j,
            steps: outcome.steps_taken,
            factorizations: outcome.factorizations,
            solves: outcome.solves,
            assembly_s: outcome.assembly_s,
            factor_s: outcome.factor_s,
            solve_s: outcome.solve_s,
            avg: outcome.errors.average(),
            max: outcome.errors.max(),
        });
    }

    if let Some(dir) = &cfg.out_dir {
        let header = "j,steps,factorizations,solves,assembly_s,factor_s,solve_s,\
                      avg_inf_l2,avg_inf_h1,avg_p_l2,max_inf_l2,max_inf_h1,max_p_l2";
        let lines: Vec<String> = rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{:.6},{:.6},{:.6},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e}",
                    r.j,
                    r.steps,
                    r.factorizations,
                    r.solves,
                    r.assembly_s,
                    r.factor_s,
                    r.solve_s,
                    r.avg.velocity_inf_l2,
                    r.avg.velocity_inf_h1,
                    r.avg.pressure_l2,
                    r.max.velocity_inf_l2,
                    r.max.velocity_inf_h1,
                    r.max.pressure_l2
                )
            })
            .collect();
        write_csv(&dir.join("efficiency.csv"), header, lines)?;
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Adaptive stiff run
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AdaptiveRunConfig {
    pub theta: Theta,
    /// Lindberg component: 1 or 2.
    pub variant: u8,
    pub omega: f64,
    pub re: f64,
    pub mesh: usize,
    pub j: usize,
    pub delta_bar: f64,
    pub seed: u64,
    pub tol: f64,
    pub kappa: f64,
    pub k_min: f64,
    pub k_max: f64,
    /// Defaults to the published interval of the chosen variant.
    pub interval: Option<(f64, f64)>,
    pub path: StepPath,
    pub run_constant: bool,
    pub out_dir: Option<PathBuf>,
}

impl AdaptiveRunConfig {
    /// Published setup: Re = 1000, h = 0.02 (m = 50), J = 10, deltas in 0.1,
    /// Tol = 1e-4, kappa = 0.95, k in [1e-6, 1e-4], omega = 3.1.
    pub fn paper(theta: Theta, variant: u8) -> Self {
        AdaptiveRunConfig {
            theta,
            variant,
            omega: 3.1,
            re: 1000.0,
            mesh: 50,
            j: 10,
            delta_bar: 0.1,
            seed: 1,
            tol: 1e-4,
            kappa: 0.95,
            k_min: 1e-6,
            k_max: 1e-4,
            interval: None,
            path: StepPath::Refactorized,
            run_constant: true,
            out_dir: None,
        }
    }

    pub fn interval_or_default(&self) -> (f64, f64) {
        self.interval.unwrap_or(match self.variant {
            1 => (1.59, 1.6032),
            _ => (1.58, 1.602),
        })
    }
}

/// Headline numbers of one run, shared by adaptive and constant paths.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub steps: u64,
    pub rejections: u64,
    pub total_cost: u64,
    pub floor_accepts: u64,
    pub completed: bool,
    pub abort: Option<String>,
    pub final_t: f64,
    pub final_energy_error_avg: f64,
    pub final_energy_error_max: f64,
    pub min_step: f64,
    pub max_step: f64,
    pub errors: ErrorReport,
}

pub struct AdaptiveOutcome {
    pub adaptive: RunSummary,
    pub adaptive_records: Vec<StepRecord>,
    pub adaptive_trace: Vec<EnergyRow>,
    pub constant: Option<RunSummary>,
    pub constant_trace: Vec<EnergyRow>,
    pub constant_step: f64,
}

fn summarize_trace(
    sol: &ManufacturedSolution,
    trace: &[EnergyRow],
    report: Option<&RunReport>,
    errors: ErrorReport,
) -> RunSummary {
    let (mut min_step, mut max_step) = (f64::INFINITY, 0.0f64);
    for row in trace {
        min_step = min_step.min(row.k);
        max_step = max_step.max(row.k);
    }
    let (final_t, final_err_avg, final_err_max) = match trace.last() {
        Some(row) => {
            let (ea, em) = sol.exact_energy_mean_max(row.t);
            (
                row.t,
                (row.energy_avg - ea).abs(),
                (row.energy_max - em).abs(),
            )
        }
        None => (f64::NAN, f64::INFINITY, f64::INFINITY),
    };
    RunSummary {
        steps: report.map(|r| r.steps).unwrap_or(trace.len() as u64),
        rejections: report.map(|r| r.rejections).unwrap_or(0),
        total_cost: report
            .map(|r| r.total_cost())
            .unwrap_or(trace.len() as u64),
        floor_accepts: report.map(|r| r.floor_accepts).unwrap_or(0),
        completed: report.map(|r| r.completed).unwrap_or(true),
        abort: report.and_then(|r| r.abort.clone()),
        final_t,
        final_energy_error_avg: final_err_avg,
        final_energy_error_max: final_err_max,
        min_step,
        max_step,
        errors,
    }
}

fn energy_csv_lines(sol: &ManufacturedSolution, trace: &[EnergyRow]) -> Vec<String> {
    trace
        .iter()
        .map(|r| {
            let (ea, em) = sol.exact_energy_mean_max(r.t);
            format!(
                "{:.9e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e}",
                r.t,
                r.k,
                r.estimate,
                r.energy_avg,
                r.energy_max,
                ea,
                em,
                (r.energy_avg - ea).abs(),
                (r.energy_max - em).abs(),
                r.viscous_avg,
                r.viscous_max,
                r.numerical_avg,
                r.numerical_max,
                r.cfl_max
            )
        })
        .collect()
}

const ENERGY_HEADER: &str = "t,k,estimate,energy_avg,energy_max,exact_energy_avg,\
exact_energy_max,energy_error_avg,energy_error_max,viscous_avg,viscous_max,\
numerical_avg,numerical_max,cfl_max";

pub fn run_adaptive(cfg: &AdaptiveRunConfig) -> Result<AdaptiveOutcome, ExperimentError> {
    let (t0, t_end) = cfg.interval_or_default();
    if !(t0 < t_end) {
        return Err(ExperimentError::BadConfig("empty time interval".into()));
    }
    let deltas = PerturbationSet::draw(cfg.j, cfg.delta_bar, cfg.seed);
    let nu = 1.0 / cfg.re;
    let variant = match cfg.variant {
        1 => TimeFactor::Lindberg1 { omega: cfg.omega },
        2 => TimeFactor::Lindberg2 { omega: cfg.omega },
        other => {
            return Err(ExperimentError::BadConfig(format!(
                "variant must be 1 or 2, got {other}"
            )))
        }
    };
    let sol = ManufacturedSolution::new(variant, nu, deltas.values.clone());
    let spaces = build_spaces(cfg.mesh)?;
    let adaptive_cfg = AdaptiveConfig::new(cfg.tol, cfg.kappa, cfg.k_min, cfg.k_max)
        .map_err(|e| ExperimentError::BadConfig(e.to_string()))?;

    // Adaptive run: two exact levels spaced k_min, then the accept/reject loop.
    let solver = EnsembleSolver::new(&spaces, physics_from(&sol), cfg.theta)?;
    let init = initialize_from_exact(
        &spaces,
        cfg.j,
        |m, x, y, t| sol.velocity(m, x, y, t),
        |_, x, y, t| sol.pressure(x, y, t),
        t0,
        cfg.k_min,
    );
    let mut driver = AdaptiveEnsemble::new(solver, init);
    driver.path = cfg.path;

    let acc = Rc::new(RefCell::new(ErrorAccumulator::new(cfg.j)));
    {
        let acc = Rc::clone(&acc);
        let sol_obs = sol.clone();
        let spaces_ref = &spaces;
        let theta = cfg.theta;
        driver.observer = Some(Box::new(move |prev, next, k| {
            let mut acc = acc.borrow_mut();
            let c = coefficients(theta, StepPair::new(k, prev.k_nm1).expect("positive steps"));
            let t_beta = c.beta[0] * (prev.t_n - prev.k_nm1)
                + c.beta[1] * prev.t_n
                + c.beta[2] * next.t_n;
            let weight = k + prev.k_nm1;
            for (m, (pm, nm)) in prev.members.iter().zip(&next.members).enumerate() {
                acc.record_level(spaces_ref, &sol_obs, m, &nm.u_n, None, next.t_n, 0.0);
                // Variable-step pressure norm: (k_n + k_nm1)-weighted beta-point sum.
                let p_blend: Vec<f64> = (0..nm.p_n.len())
                    .map(|q| {
                        c.beta[2] * nm.p_n[q] + c.beta[1] * pm.p_n[q] + c.beta[0] * pm.p_nm1[q]
                    })
                    .collect();
                let pe = pressure_error_l2(spaces_ref, &p_blend, &|x, y| {
                    sol_obs.pressure(x, y, t_beta)
                });
                acc.p_sq[m] += weight * pe * pe;
            }
        }));
    }

    let report = adaptive_loop(&mut driver, t_end, &adaptive_cfg);
    let adaptive_trace = driver.trace.clone();
    driver.observer = None;
    let errors = Rc::try_unwrap(acc)
        .map_err(|_| ExperimentError::BadConfig("observer still alive".into()))?
        .into_inner()
        .finish();
    let adaptive_summary = summarize_trace(&sol, &adaptive_trace, Some(&report), errors);

    // Matched constant-step run at the same total cost in steps.
    let total_cost = report.total_cost().max(1);
    let k_const = (t_end - t0) / (total_cost + 1) as f64;
    let (constant_summary, constant_trace) = if cfg.run_constant {
        let outcome = constant_run(
            &spaces,
            &sol,
            cfg.theta,
            cfg.path,
            t0,
            k_const,
            total_cost,
            true,
        )?;
        let mut summary = summarize_trace(&sol, &outcome.trace, None, outcome.errors);
        summary.steps = outcome.steps_taken;
        summary.total_cost = outcome.steps_taken;
        summary.completed = outcome.completed;
        summary.abort = outcome.abort.clone();
        (Some(summary), outcome.trace)
    } else {
        (None, Vec::new())
    };

    if let Some(dir) = &cfg.out_dir {
        write_csv(
            &dir.join("adaptive_trace.csv"),
            "n,t,k,estimate,accepted,rejections",
            report.records.iter().map(|r| {
                format!(
                    "{},{:.9e},{:.6e},{:.6e},{},{}",
                    r.n, r.t, r.k, r.estimate, r.accepted as u8, r.rejections
                )
            }),
        )?;
        write_csv(
            &dir.join("adaptive_energy.csv"),
            ENERGY_HEADER,
            energy_csv_lines(&sol, &adaptive_trace),
        )?;
        if !constant_trace.is_empty() {
            write_csv(
                &dir.join("constant_energy.csv"),
                ENERGY_HEADER,
                energy_csv_lines(&sol, &constant_trace),
            )?;
        }
        let mut lines = vec![summary_line("adaptive", &adaptive_summary)];
        if let Some(cs) = &constant_summary {
            lines.push(summary_line("constant", cs));
        }
        write_csv(
            &dir.join("summary.csv"),
            "run,steps,rejections,total_cost,floor_accepts,completed,final_t,\
             final_energy_error_avg,final_energy_error_max,min_step,max_step",
            lines,
        )?;
    }

    Ok(AdaptiveOutcome {
        adaptive: adaptive_summary,
        adaptive_records: report.records,
        adaptive_trace,
        constant: constant_summary,
        constant_trace,
        constant_step: k_const,
    })
}

fn summary_line(name: &str, s: &RunSummary) -> String {
    format!(
        "{},{},{},{},{},{},{:.9e},{:.6e},{:.6e},{:.6e},{:.6e}",
        name,
        s.steps,
        s.rejections,
        s.total_cost,
        s.floor_accepts,
        s.completed as u8,
        s.final_t,
        s.final_energy_error_avg,
        s.final_energy_error_max,
        s.min_step,
        s.max_step
    )
}
