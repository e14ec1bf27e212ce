//! Solve orchestration and artifact emission.

use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::Context;
use mfg_core::coupling::Coupling;
use mfg_core::discretization::{ConstraintOperator, DiscreteField, GridSpec};
use mfg_core::io::{write_scalar_file, write_vector_file};
use mfg_core::multipop::{
    solve_best_response, solve_potential, FixedPointRecord, SharedConstraintReport,
};
use mfg_core::solver::{solve_p1, solve_p2, IterationRecord, SolveResult};
use mfg_core::verify::{uniqueness_probe, ResidualReport, UniquenessReport};
use mfg_core::MfgError;
use serde::{Deserialize, Serialize};

use crate::config::{Problem, ProblemKind, RunConfig};

/// Certification thresholds.
pub const KKT_LIMIT: f64 = 1e-5;
pub const FP_LIMIT: f64 = 1e-8;
pub const MASS_LIMIT: f64 = 1e-10;
pub const DRIFT_LIMIT: f64 = 1e-5;
pub const POSITIVITY_LIMIT: f64 = 1e-8;
pub const PRESSURE_LIMIT: f64 = -1e-10;
pub const COMPLEMENTARITY_LIMIT: f64 = 1e-6;
pub const SUPPORT_LIMIT: f64 = 1e-5;
pub const BOUND_LIMIT: f64 = 1e-5;
pub const FORWARD_LIMIT: f64 = 1e-4;
pub const UNIQUENESS_LIMIT: f64 = 1e-5;
pub const APRIORI_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Limit {
    AtMost,
    AtLeast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// `None` when the quantity could not be computed; such a check fails.
    pub value: Option<f64>,
    pub limit: Limit,
    pub threshold: f64,
    pub pass: bool,
}

impl Check {
    fn new(name: impl Into<String>, value: Option<f64>, limit: Limit, threshold: f64) -> Self {
        let pass = value.is_some_and(|v| match limit {
            Limit::AtMost => v <= threshold,
            Limit::AtLeast => v >= threshold,
        });
        Self { name: name.into(), value, limit, threshold, pass }
    }
}

/// The certificate: every check a converged run must pass.
pub fn certificate(
    kind: ProblemKind,
    residuals: &[ResidualReport],
    shared: Option<&SharedConstraintReport>,
    uniqueness: Option<&UniquenessReport>,
) -> Vec<Check> {
    use Limit::*;
    let mut checks = Vec::new();
    for (i, r) in residuals.iter().enumerate() {
        let pre = if residuals.len() > 1 { format!("population_{}.", i + 1) } else { String::new() };
        let mut add = |n: &str, v: Option<f64>, l, t| checks.push(Check::new(format!("{pre}{n}"), v, l, t));
        add("kkt_row1", Some(r.kkt_row1), AtMost, KKT_LIMIT);
        add("fp_residual", Some(r.fp_residual), AtMost, FP_LIMIT);
        add("mass_error", Some(r.mass_error), AtMost, MASS_LIMIT);
        add("drift_residual", Some(r.drift_residual), AtMost, DRIFT_LIMIT);
        add("min_density", Some(r.min_density), AtLeast, POSITIVITY_LIMIT);
        add("forward_fp_discrepancy", r.forward_fp_discrepancy, AtMost, FORWARD_LIMIT);
        if let Some(b) = r.apriori_w_bound {
            // Non-strict: with a vanishing right-hand side both sides are zero up to roundoff.
            add("apriori_w_bound_excess", Some(b.lhs - b.rhs), AtMost, APRIORI_SLACK);
        }
        if kind == ProblemKind::P2 {
            add("min_p", Some(r.min_p), AtLeast, PRESSURE_LIMIT);
            add("complementarity", Some(r.complementarity), AtMost, COMPLEMENTARITY_LIMIT);
            add("support_violation", Some(r.support_violation), AtMost, SUPPORT_LIMIT);
            add("bound_violation", Some(r.bound_violation), AtMost, BOUND_LIMIT);
        }
    }
    if let Some(s) = shared {
        let mut add = |n: &str, v: Option<f64>, l, t| checks.push(Check::new(format!("shared.{n}"), v, l, t));
        add("min_p", Some(s.min_p), AtLeast, PRESSURE_LIMIT);
        add("complementarity", Some(s.complementarity), AtMost, COMPLEMENTARITY_LIMIT);
        add("support_violation", Some(s.support_violation), AtMost, SUPPORT_LIMIT);
        add("bound_violation", Some(s.bound_violation), AtMost, BOUND_LIMIT);
        add("feasibility_slack", s.witness.map(|w| w.min_slack), AtLeast, f64::MIN_POSITIVE);
    }
    if let Some(u) = uniqueness.filter(|u| u.pass.is_some()) {
        checks.push(Check::new("uniqueness.m_spread", Some(u.m_spread), AtMost, UNIQUENESS_LIMIT));
    }
    checks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub version: String,
    pub problem: ProblemKind,
    pub converged: bool,
    pub certified: bool,
    pub certificate: Vec<Check>,
    pub lambda: Vec<f64>,
    pub objective: f64,
    pub residuals: Vec<ResidualReport>,
    pub shared: Option<SharedConstraintReport>,
    pub iterations: usize,
    /// Best-response sweeps; absent for single solves.
    pub outer_iterations: Option<usize>,
    pub step: f64,
    pub uniqueness: Option<UniquenessReport>,
    pub wall_time_seconds: f64,
    pub threads: usize,
    pub config: RunConfig,
}

#[derive(Debug)]
pub enum RunError {
    /// The configuration describes an invalid problem.
    Config(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for RunError {
    fn from(e: anyhow::Error) -> Self {
        Self::Runtime(e)
    }
}

impl From<MfgError> for RunError {
    fn from(e: MfgError) -> Self {
        match e {
            MfgError::InvalidInput(_) | MfgError::InfeasibleKappa(_) => Self::Config(e.to_string()),
            other => Self::Runtime(other.into()),
        }
    }
}

pub struct Solved {
    pub populations: Vec<SolveResult>,
    pub p: Option<DiscreteField>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub shared: Option<SharedConstraintReport>,
    pub outer: Option<Vec<FixedPointRecord>>,
    pub uniqueness: Option<UniquenessReport>,
}

/// Runs the configured solve without touching the filesystem.
pub fn solve(cfg: &RunConfig, op: &ConstraintOperator) -> Result<Solved, RunError> {
    let mut params = cfg.solver.clone();
    params.record_history |= cfg.diagnostics;
    match cfg.problem(op)? {
        Problem::Single { model, coupling, kappa } => {
            let r = match &kappa {
                None => solve_p1(&model, &coupling, op, &params)?,
                Some(k) => solve_p2(&model, &coupling, op, k, &params)?,
            };
            let uniqueness = if cfg.uniqueness_trials >= 2 {
                let problem = mfg_core::verify::Problem { model: &model, coupling: &coupling, op, kappa: kappa.as_ref() };
                Some(uniqueness_probe(&problem, &cfg.solver, cfg.uniqueness_trials, 0.5, cfg.seed)?)
            } else {
                None
            };
            Ok(Solved {
                p: r.p.clone(),
                objective: r.objective,
                iterations: r.iterations,
                converged: r.converged,
                populations: vec![r],
                shared: None,
                outer: None,
                uniqueness,
            })
        }
        Problem::Multi(spec) => {
            if cfg.problem == ProblemKind::MultipopBr {
                let out = solve_best_response(&spec, op, &params, &cfg.best_response)?;
                let objective = out.populations.iter().map(|r| r.objective).sum();
                Ok(Solved {
                    p: None,
                    objective,
                    iterations: out.populations.iter().map(|r| r.iterations).sum(),
                    converged: out.converged && out.populations.iter().all(|r| r.converged),
                    populations: out.populations,
                    shared: None,
                    outer: Some(out.history),
                    uniqueness: None,
                })
            } else {
                let out = solve_potential(&spec, op, &params)?;
                Ok(Solved {
                    p: out.p,
                    objective: out.objective,
                    iterations: out.iterations,
                    converged: out.converged,
                    populations: out.populations,
                    shared: out.shared,
                    outer: None,
                    uniqueness: None,
                })
            }
        }
    }
}

/// Field file stem for population `i` of `n`.
pub fn stem(name: &str, i: usize, n: usize) -> String {
    if n > 1 {
        format!("{name}_{}", i + 1)
    } else {
        name.to_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub lambda: Vec<f64>,
}

/// Solves, writes every artifact into `out`, and returns the metadata.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<Metadata, RunError> {
    let start = Instant::now();
    let grid = cfg.grid_spec().map_err(|e| RunError::Config(e.to_string()))?;
    let op = ConstraintOperator::build(&grid);
    let solved = solve(cfg, &op)?;
    let wall = start.elapsed().as_secs_f64();

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let n = solved.populations.len();
    for (i, r) in solved.populations.iter().enumerate() {
        write_scalar_file(&out.join(format!("{}.csv", stem("m", i, n))), &grid, &r.m).map_err(anyhow::Error::from)?;
        write_scalar_file(&out.join(format!("{}.csv", stem("u", i, n))), &grid, &r.u).map_err(anyhow::Error::from)?;
        write_vector_file(&out.join(format!("{}.csv", stem("w", i, n))), &grid, &r.w).map_err(anyhow::Error::from)?;
    }
    if let Some(p) = &solved.p {
        write_scalar_file(&out.join("p.csv"), &grid, p).map_err(anyhow::Error::from)?;
    }
    let lambda: Vec<f64> = solved.populations.iter().map(|r| r.lambda).collect();
    write_json(&out.join("lambdas.json"), &Lambdas { lambda: lambda.clone() })?;

    if cfg.diagnostics {
        write_diagnostics(&out.join("iterations.csv"), &solved)?;
    }
    if cfg.emit_heatmaps {
        for (i, r) in solved.populations.iter().enumerate() {
            write_ppm(&out.join(format!("{}.ppm", stem("m", i, n))), &grid, &r.m)?;
            write_ppm(&out.join(format!("{}.ppm", stem("u", i, n))), &grid, &r.u)?;
        }
        if let Some(p) = &solved.p {
            write_ppm(&out.join("p.ppm"), &grid, p)?;
        }
    }

    let residuals: Vec<ResidualReport> = solved.populations.iter().map(|r| r.residuals.clone()).collect();
    let checks = certificate(cfg.problem, &residuals, solved.shared.as_ref(), solved.uniqueness.as_ref());
    let meta = Metadata {
        version: env!("CARGO_PKG_VERSION").to_owned(),
        problem: cfg.problem,
        converged: solved.converged,
        certified: solved.converged && checks.iter().all(|c| c.pass),
        certificate: checks,
        lambda,
        objective: solved.objective,
        residuals,
        shared: solved.shared.clone(),
        iterations: solved.iterations,
        outer_iterations: solved.outer.as_ref().map(Vec::len),
        step: solved.populations[0].step,
        uniqueness: solved.uniqueness.clone(),
        wall_time_seconds: wall,
        threads: rayon::current_num_threads(),
        config: cfg.clone(),
    };
    write_json(&out.join("metadata.json"), &meta)?;
    Ok(meta)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_diagnostics(path: &Path, solved: &Solved) -> anyhow::Result<()> {
    let mut text = String::new();
    if let Some(outer) = &solved.outer {
        let np = solved.populations.len();
        text.push_str("outer");
        (1..=np).for_each(|i| text.push_str(&format!(",change_{i}")));
        (1..=np).for_each(|i| text.push_str(&format!(",inner_iterations_{i}")));
        text.push('\n');
        for rec in outer {
            text.push_str(&rec.outer.to_string());
            rec.change.iter().for_each(|c| text.push_str(&format!(",{c:.16e}")));
            rec.inner_iterations.iter().for_each(|k| text.push_str(&format!(",{k}")));
            text.push('\n');
        }
    } else {
        text.push_str("iteration,objective,pde_residual,kkt_residual,drift_residual,step\n");
        let history: &[IterationRecord] = &solved.populations[0].history;
        for r in history {
            text.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                r.iteration, r.objective, r.pde_residual, r.kkt_residual, r.drift_residual, r.step
            ));
        }
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Binary PPM, linear grayscale from the field minimum (black) to its
/// maximum (white), `(nx+1) × (ny+1)` pixels with `y` increasing upwards.
pub fn ppm_bytes(grid: &GridSpec, field: &[f64]) -> Vec<u8> {
    let (w, h) = (grid.nodes_x(), grid.nodes_y());
    let lo = field.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for row in (0..h).rev() {
        for col in 0..w {
            let v = field[grid.index(col, row)];
            let g = if span > 0.0 { ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 };
            bytes.extend_from_slice(&[g, g, g]);
        }
    }
    bytes
}

fn write_ppm(path: &Path, grid: &GridSpec, field: &[f64]) -> anyhow::Result<()> {
    fs::write(path, ppm_bytes(grid, field)).with_context(|| format!("writing {}", path.display()))
}

/// Recomputes the residuals of stored fields.
pub fn recertify(
    cfg: &RunConfig,
    op: &ConstraintOperator,
    populations: &mut [SolveResult],
) -> Result<Option<SharedConstraintReport>, RunError> {
    match cfg.problem(op)? {
        Problem::Single { model, coupling, kappa } => {
            let c = Coupling::new(&coupling, op)?;
            let ctx = mfg_core::verify::ProblemContext { model: &model, coupling: &c, op, kappa: kappa.as_ref() };
            let r = &mut populations[0];
            r.residuals = mfg_core::verify::certify(r, &ctx)?;
            Ok(None)
        }
        Problem::Multi(spec) => Ok(mfg_core::multipop::certify_populations(&spec, op, populations)?),
    }
}
