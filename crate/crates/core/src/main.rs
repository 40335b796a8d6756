//! Command-line harness: convergence sweeps, efficiency scaling and the
//! adaptive stiff runs, each emitting CSV tables into an output directory.
//!
//! Options may come from a key=value config file; explicit flags win.

use std::collections::HashMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dln_ensemble::ensemble::StepPath;
use dln_ensemble::experiments::{
    run_adaptive, run_convergence, run_efficiency, AdaptiveRunConfig, ConvergenceConfig,
    EfficiencyConfig,
};
use dln_ensemble::Theta;

#[derive(Parser)]
#[command(name = "dln-ensemble", about = "Variable time-stepping DLN ensemble solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Constant-step convergence sweep over a mesh list (k = h/2).
    Converge(ConvergeArgs),
    /// Shared-factorization timing and accuracy across ensemble sizes.
    Efficiency(EfficiencyArgs),
    /// Adaptive stiff run plus a matched constant-step comparison.
    Adaptive(AdaptiveArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// key=value config file; flags override its entries
    #[arg(long)]
    config: Option<PathBuf>,
    /// method parameter; accepts decimals, "2/3" or "2/sqrt5"
    #[arg(long)]
    theta: Option<String>,
    /// Reynolds number (viscosity is 1/Re)
    #[arg(long)]
    re: Option<f64>,
    /// time-factor frequency
    #[arg(long)]
    omega: Option<f64>,
    /// RNG seed for the member perturbations
    #[arg(long)]
    seed: Option<u64>,
    /// perturbation half-width for the member amplitudes
    #[arg(long)]
    delta: Option<f64>,
    /// step realization: "direct" or "refactorized"
    #[arg(long)]
    path: Option<String>,
    /// directory for CSV output
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ConvergeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// comma-separated mesh subdivisions, e.g. 8,16,32
    #[arg(long)]
    mesh: Option<String>,
    /// ensemble size
    #[arg(long)]
    j: Option<usize>,
    /// final time
    #[arg(long)]
    t_final: Option<f64>,
}

#[derive(Args)]
struct EfficiencyArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// mesh subdivision
    #[arg(long)]
    mesh: Option<usize>,
    /// comma-separated ensemble sizes, e.g. 1,10,100
    #[arg(long)]
    j: Option<String>,
    /// final time
    #[arg(long)]
    t_final: Option<f64>,
}

#[derive(Args)]
struct AdaptiveArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Lindberg component: 1 or 2
    #[arg(long)]
    variant: Option<u8>,
    /// mesh subdivision (h = 1/mesh)
    #[arg(long)]
    mesh: Option<usize>,
    /// ensemble size
    #[arg(long)]
    j: Option<usize>,
    /// relative LTE tolerance
    #[arg(long)]
    tol: Option<f64>,
    /// controller safety factor
    #[arg(long)]
    kappa: Option<f64>,
    /// minimum time step
    #[arg(long)]
    kmin: Option<f64>,
    /// maximum time step
    #[arg(long)]
    kmax: Option<f64>,
    /// interval start (defaults to the variant's published window)
    #[arg(long)]
    t0: Option<f64>,
    /// interval end
    #[arg(long)]
    t_end: Option<f64>,
    /// skip the matched constant-step comparison run
    #[arg(long)]
    no_constant: bool,
}

/// key=value lines; '#' starts a comment, blank lines ignored.
fn load_config(path: Option<&PathBuf>) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p)
            .with_context(|| format!("reading config {}", p.display()))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("{}:{}: expected key=value", p.display(), lineno + 1))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    Ok(map)
}

fn parse_theta(text: &str) -> Result<Theta> {
    let t = match text.trim() {
        "2/3" => 2.0 / 3.0,
        "2/sqrt5" | "2/sqrt(5)" => 2.0 / 5.0_f64.sqrt(),
        other => other.parse::<f64>().context("theta must be a number, 2/3 or 2/sqrt5")?,
    };
    Theta::new(t).map_err(|e| anyhow::anyhow!(e))
}

fn parse_path(text: &str) -> Result<StepPath> {
    match text.trim() {
        "direct" => Ok(StepPath::Direct),
        "refactorized" => Ok(StepPath::Refactorized),
        other => bail!("unknown step path {other:?}; use direct or refactorized"),
    }
}

fn parse_list<T: std::str::FromStr>(text: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|e| anyhow::anyhow!("bad list entry {s:?}: {e}"))
        })
        .collect()
}

/// Flag value, else config-file value, else default.
fn resolve<T, F: FnOnce(&str) -> Result<T>>(
    flag: Option<T>,
    cfg: &HashMap<String, String>,
    key: &str,
    parse: F,
    default: T,
) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    if let Some(raw) = cfg.get(key) {
        return parse(raw);
    }
    Ok(default)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Converge(args) => converge(args),
        Command::Efficiency(args) => efficiency(args),
        Command::Adaptive(args) => adaptive(args),
    }
}

fn base_with_common(
    common: &CommonArgs,
) -> Result<(HashMap<String, String>, Theta, StepPath, Option<PathBuf>)> {
    let cfg = load_config(common.config.as_ref())?;
    let theta = match &common.theta {
        Some(t) => parse_theta(t)?,
        None => match cfg.get("theta") {
            Some(t) => parse_theta(t)?,
            None => Theta::two_thirds(),
        },
    };
    let path = match &common.path {
        Some(p) => parse_path(p)?,
        None => match cfg.get("path") {
            Some(p) => parse_path(p)?,
            None => StepPath::Refactorized,
        },
    };
    let out_dir = common
        .out_dir
        .clone()
        .or_else(|| cfg.get("out_dir").map(PathBuf::from));
    Ok((cfg, theta, path, out_dir))
}

fn converge(args: ConvergeArgs) -> Result<()> {
    let (cfg, theta, path, out_dir) = base_with_common(&args.common)?;
    let mut c = ConvergenceConfig::paper(theta);
    c.path = path;
    c.out_dir = out_dir;
    c.re = resolve(args.common.re, &cfg, "re", |s| Ok(s.parse()?), c.re)?;
    c.omega = resolve(args.common.omega, &cfg, "omega", |s| Ok(s.parse()?), c.omega)?;
    c.seed = resolve(args.common.seed, &cfg, "seed", |s| Ok(s.parse()?), c.seed)?;
    c.delta_bar = resolve(args.common.delta, &cfg, "delta", |s| Ok(s.parse()?), c.delta_bar)?;
    c.j = resolve(args.j, &cfg, "j", |s| Ok(s.parse()?), c.j)?;
    c.t_final = resolve(args.t_final, &cfg, "t_final", |s| Ok(s.parse()?), c.t_final)?;
    c.meshes = resolve(
        args.mesh.map(|m| parse_list::<usize>(&m)).transpose()?,
        &cfg,
        "mesh",
        |s| parse_list::<usize>(s),
        c.meshes,
    )?;

    let result = run_convergence(&c).map_err(|e| anyhow::anyhow!(e.to_string()))?;
    println!("h,avg_inf_l2,avg_inf_h1,avg_p_l2");
    for row in &result.rows {
        let a = row.report.average();
        println!(
            "{:.6e},{:.6e},{:.6e},{:.6e}",
            row.h, a.velocity_inf_l2, a.velocity_inf_h1, a.pressure_l2
        );
    }
    for (w, r) in result.rows.windows(2).zip(result.average_rates()) {
        println!(
            "rate {} -> {}: inf_l2 {:.3}, inf_h1 {:.3}, p_l2 {:.3}",
            w[0].m, w[1].m, r[0], r[1], r[2]
        );
    }
    if let Some(dir) = &c.out_dir {
        println!("wrote {}", dir.join("convergence.csv").display());
    }
    Ok(())
}

fn efficiency(args: EfficiencyArgs) -> Result<()> {
    let (cfg, theta, path, out_dir) = base_with_common(&args.common)?;
    let mut c = EfficiencyConfig::paper(theta);
    c.path = path;
    c.out_dir = out_dir;
    c.re = resolve(args.common.re, &cfg, "re", |s| Ok(s.parse()?), c.re)?;
    c.omega = resolve(args.common.omega, &cfg, "omega", |s| Ok(s.parse()?), c.omega)?;
    c.seed = resolve(args.common.seed, &cfg, "seed", |s| Ok(s.parse()?), c.seed)?;
    c.delta_bar = resolve(args.common.delta, &cfg, "delta", |s| Ok(s.parse()?), c.delta_bar)?;
    c.mesh = resolve(args.mesh, &cfg, "mesh", |s| Ok(s.parse()?), c.mesh)?;
    c.t_final = resolve(args.t_final, &cfg, "t_final", |s| Ok(s.parse()?), c.t_final)?;
    c.j_list = resolve(
        args.j.map(|m| parse_list::<usize>(&m)).transpose()?,
        &cfg,
        "j",
        |s| parse_list::<usize>(s),
        c.j_list,
    )?;

    let rows = run_efficiency(&c).map_err(|e| anyhow::anyhow!(e.to_string()))?;
    println!("j,steps,factorizations,assembly_s,factor_s,solve_s,avg_inf_l2");
    for r in &rows {
        println!(
            "{},{},{},{:.4},{:.4},{:.4},{:.6e}",
            r.j, r.steps, r.factorizations, r.assembly_s, r.factor_s, r.solve_s,
            r.avg.velocity_inf_l2
        );
    }
    if let Some(dir) = &c.out_dir {
        println!("wrote {}", dir.join("efficiency.csv").display());
    }
    Ok(())
}

fn adaptive(args: AdaptiveArgs) -> Result<()> {
    let (cfg, theta, path, out_dir) = base_with_common(&args.common)?;
    let variant = resolve(args.variant, &cfg, "variant", |s| Ok(s.parse()?), 2)?;
    let mut c = AdaptiveRunConfig::paper(theta, variant);
    c.path = path;
    c.out_dir = out_dir;
    c.re = resolve(args.common.re, &cfg, "re", |s| Ok(s.parse()?), c.re)?;
    c.omega = resolve(args.common.omega, &cfg, "omega", |s| Ok(s.parse()?), c.omega)?;
    c.seed = resolve(args.common.seed, &cfg, "seed", |s| Ok(s.parse()?), c.seed)?;
    c.delta_bar = resolve(args.common.delta, &cfg, "delta", |s| Ok(s.parse()?), c.delta_bar)?;
    c.mesh = resolve(args.mesh, &cfg, "mesh", |s| Ok(s.parse()?), c.mesh)?;
    c.j = resolve(args.j, &cfg, "j", |s| Ok(s.parse()?), c.j)?;
    c.tol = resolve(args.tol, &cfg, "tol", |s| Ok(s.parse()?), c.tol)?;
    c.kappa = resolve(args.kappa, &cfg, "kappa", |s| Ok(s.parse()?), c.kappa)?;
    c.k_min = resolve(args.kmin, &cfg, "kmin", |s| Ok(s.parse()?), c.k_min)?;
    c.k_max = resolve(args.kmax, &cfg, "kmax", |s| Ok(s.parse()?), c.k_max)?;
    c.run_constant = !args.no_constant;
    let (d0, d1) = c.interval_or_default();
    let t0 = resolve(args.t0, &cfg, "t0", |s| Ok(s.parse()?), d0)?;
    let t_end = resolve(args.t_end, &cfg, "t_end", |s| Ok(s.parse()?), d1)?;
    c.interval = Some((t0, t_end));

    let outcome = run_adaptive(&c).map_err(|e| anyhow::anyhow!(e.to_string()))?;
    let a = &outcome.adaptive;
    println!(
        "adaptive: steps {}, rejections {}, total cost {}, completed {}, \
         final energy error avg {:.3e}, min step {:.3e}",
        a.steps, a.rejections, a.total_cost, a.completed, a.final_energy_error_avg, a.min_step
    );
    if let Some(cst) = &outcome.constant {
        println!(
            "constant (k = {:.3e}): steps {}, completed {}, final energy error avg {:.3e}{}",
            outcome.constant_step,
            cst.steps,
            cst.completed,
            cst.final_energy_error_avg,
            cst.abort
                .as_ref()
                .map(|a| format!(" (aborted: {a})"))
                .unwrap_or_default()
        );
    }
    if let Some(dir) = &c.out_dir {
        println!("wrote CSVs under {}", dir.display());
    }
    Ok(())
}
