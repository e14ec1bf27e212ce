//! A posteriori certification of a computed equilibrium.
//!
//! Everything here is recomputed from the returned fields `(m, w, u, λ, p)`
//! alone: the HJB row, the Fokker–Planck constraint, the drift identity,
//! positivity, complementarity and support of `p`, the a priori bound on
//! `‖w‖_q`, the duality gap when available, and an independent forward
//! Fokker–Planck solve driven by `u`.

use serde::{Deserialize, Serialize};

use crate::coupling::{pow_primitive, Coupling, CouplingSpec};
use crate::discretization::{ConstraintOperator, DiscreteField};
use crate::error::Result;
use crate::hamiltonian::{norm2, HamiltonianModel};
use crate::kinetic::bq_value;
use crate::solver::{forward_fp_check, solve_p1_from, solve_p2_from, Initialization, SolveResult, SolverParams};

/// Densities at or below this are excluded from the HJB residual.
pub const DENSITY_GUARD: f64 = 1e-12;
/// Relative threshold on `p` defining the active set.
pub const ACTIVE_FRACTION: f64 = 1e-6;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AprioriBound {
    /// `‖w‖_q^q`.
    pub lhs: f64,
    /// `q C₁^{q−1} (ℱ(1/|Ω|) + 2C₂ − C_ℱ) ‖m‖_∞^{q−1}`.
    pub rhs: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    /// Largest nodal residual of the HJB row over nodes with positive density.
    pub kkt_row1: f64,
    /// `‖Am + Bw‖₂ / (1 + ‖Bw‖₂)`.
    pub fp_residual: f64,
    pub mass_error: f64,
    /// `‖w + m∇_ξH(∇_h u)‖_q / (1 + ‖w‖_q)`.
    pub drift_residual: f64,
    pub min_density: f64,
    pub max_density: f64,
    /// `min m / max m`; informational.
    pub harnack_ratio: f64,
    /// `|Σ ω p (κ − m)|`; zero without a density bound.
    pub complementarity: f64,
    /// Largest `κ − m` over nodes with `p > 10⁻⁶‖p‖_∞`.
    pub support_violation: f64,
    pub active_nodes: usize,
    pub min_p: f64,
    /// Largest `m − κ`, clipped at zero.
    pub bound_violation: f64,
    pub apriori_w_bound: Option<AprioriBound>,
    pub duality_gap: Option<f64>,
    /// `‖m̂ − m‖_∞` for the forward solve `m̂` driven by `u`; `None` if it stalled.
    pub forward_fp_discrepancy: Option<f64>,
}

/// Inputs needed to recompute the residuals of one population.
pub struct ProblemContext<'a> {
    pub model: &'a HamiltonianModel,
    pub coupling: &'a Coupling,
    pub op: &'a ConstraintOperator,
    pub kappa: Option<&'a DiscreteField>,
}

pub fn certify(result: &SolveResult, ctx: &ProblemContext) -> Result<ResidualReport> {
    certify_weighted(result, ctx, 1.0)
}

/// As [`certify`], with the pressure entering the HJB row as `−α p`.
pub fn certify_weighted(result: &SolveResult, ctx: &ProblemContext, alpha: f64) -> Result<ResidualReport> {
    let op = ctx.op;
    let grid = op.grid();
    let n = op.node_count();
    let w8 = op.weights();
    let q = ctx.model.q();
    let (m, w, u) = (&result.m, &result.w, &result.u);
    let zeros = DiscreteField::zeros(n);
    let p = result.p.as_ref().unwrap_or(&zeros);

    let g = ctx.coupling.derivative(op, m);
    let au = op.apply_a(u);
    let du = op.nodal_gradient(u);
    let mut kkt: f64 = 0.0;
    let mut drift_num = 0.0;
    let mut w_q = 0.0;
    for k in 0..n {
        let h = ctx.model.at(grid.node(k));
        if m[k] > DENSITY_GUARD {
            let r = au[k] / w8[k] + h.value(du[k]) + result.lambda - alpha * p[k] - g[k];
            kkt = kkt.max(r.abs());
        }
        let gh = h.grad(du[k]);
        drift_num += w8[k] * norm2([w[k][0] + m[k] * gh[0], w[k][1] + m[k] * gh[1]]).powf(q);
        w_q += w8[k] * norm2(w[k]).powf(q);
    }
    let drift = drift_num.powf(1.0 / q) / (1.0 + w_q.powf(1.0 / q));

    let min_density = m.min();
    let max_density = m.max();

    let (mut complementarity, mut support, mut active, mut bound_violation) = (0.0, 0.0f64, 0, 0.0f64);
    let min_p = if result.p.is_some() { p.min() } else { 0.0 };
    if let Some(kappa) = ctx.kappa {
        let p_max = p.max_abs();
        let mut c = 0.0;
        for k in 0..n {
            c += w8[k] * p[k] * (kappa[k] - m[k]);
            bound_violation = bound_violation.max(m[k] - kappa[k]);
            if p_max > 0.0 && p[k] > ACTIVE_FRACTION * p_max {
                active += 1;
                support = support.max(kappa[k] - m[k]);
            }
        }
        complementarity = c.abs();
    }

    let area = grid.area();
    let apriori = ctx.coupling.global_lower_bound(op).map(|c_f| {
        let f_ref = ctx.coupling.value(op, &vec![1.0 / area; n]);
        let (c1, c2) = (ctx.model.growth_c1(), ctx.model.growth_c2());
        let rhs = q * c1.powf(q - 1.0) * (f_ref + 2.0 * c2 - c_f) * max_density.abs().powf(q - 1.0);
        AprioriBound { lhs: w_q, rhs, pass: w_q < rhs }
    });

    let duality_gap = duality_gap(result, ctx, alpha);

    let forward = forward_fp_check(ctx.model, op, u).ok().map(|mh| {
        mh.iter().zip(m.iter()).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()))
    });

    Ok(ResidualReport {
        kkt_row1: kkt,
        fp_residual: op.fp_residual(m, w),
        mass_error: (op.integrate(m) - 1.0).abs(),
        drift_residual: drift,
        min_density,
        max_density,
        harnack_ratio: if max_density > 0.0 { min_density / max_density } else { 0.0 },
        complementarity,
        support_violation: support,
        active_nodes: active,
        min_p,
        bound_violation,
        apriori_w_bound: apriori,
        duality_gap,
        forward_fp_discrepancy: forward,
    })
}

/// `J(m, w) − D(u, λ, p)` for strictly convex local couplings, where the dual
/// function is evaluated in closed form node by node:
/// `D = λ − Σ ω p κ + Σ ω inf_{z≥0} [F(z) + z (p − (Au)/ω − λ − H(∇u))]`.
fn duality_gap(result: &SolveResult, ctx: &ProblemContext, alpha: f64) -> Option<f64> {
    let op = ctx.op;
    let grid = op.grid();
    let n = op.node_count();
    let w8 = op.weights();
    // inf_{z ≥ 0} F(z) + s z, per kind.
    let inner: Box<dyn Fn(usize, f64) -> f64> = match ctx.coupling.spec() {
        CouplingSpec::LocalPrimitive { r, sign, .. } if *sign > 0.0 => {
            let r = *r;
            Box::new(move |_, s| {
                if s >= 0.0 {
                    0.0
                } else {
                    let z = (-s).powf(1.0 / r);
                    pow_primitive(r, 1.0, z) + s * z
                }
            })
        }
        CouplingSpec::Frozen { self_coeff, offset } if *self_coeff > 0.0 => {
            let (c, off) = (*self_coeff, offset.clone());
            Box::new(move |k, s| {
                let t = s + off[k];
                if t >= 0.0 {
                    0.0
                } else {
                    -t * t / (2.0 * c)
                }
            })
        }
        _ => return None,
    };
    let (m, w, u) = (&result.m, &result.w, &result.u);
    let zeros = DiscreteField::zeros(n);
    let p = result.p.as_ref().unwrap_or(&zeros);
    let au = op.apply_a(u);
    let du = op.nodal_gradient(u);
    let mut primal = ctx.coupling.value(op, m);
    let mut dual = result.lambda;
    for k in 0..n {
        let h = ctx.model.at(grid.node(k));
        primal += w8[k] * bq_value(&h, m[k], w[k]);
        let s = alpha * p[k] - au[k] / w8[k] - result.lambda - h.value(du[k]);
        dual += w8[k] * inner(k, s);
        if let Some(kappa) = ctx.kappa {
            dual -= w8[k] * alpha * p[k] * kappa[k];
        }
    }
    Some(primal - dual)
}

/// A single-population problem, for re-solving from several starting points.
pub struct Problem<'a> {
    pub model: &'a HamiltonianModel,
    pub coupling: &'a CouplingSpec,
    pub op: &'a ConstraintOperator,
    pub kappa: Option<&'a DiscreteField>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessReport {
    pub trials: usize,
    pub m_spread: f64,
    pub u_spread: f64,
    pub lambda_spread: f64,
    pub all_converged: bool,
    /// `None` when the coupling is not convex and no uniqueness is claimed.
    pub pass: Option<bool>,
}

/// Re-solves from `trials` random initializations and reports the largest
/// pairwise sup-norm differences of `m` and `u`.
pub fn uniqueness_probe(
    problem: &Problem,
    params: &SolverParams,
    trials: usize,
    scale: f64,
    seed: u64,
) -> Result<UniquenessReport> {
    let mut runs: Vec<SolveResult> = Vec::with_capacity(trials);
    for t in 0..trials {
        let init = Initialization::Random { seed: seed.wrapping_add(t as u64), scale };
        let r = match problem.kappa {
            None => solve_p1_from(problem.model, problem.coupling, problem.op, params, &init)?,
            Some(k) => solve_p2_from(problem.model, problem.coupling, problem.op, k, params, &init)?,
        };
        runs.push(r);
    }
    let sup = |a: &[f64], b: &[f64]| a.iter().zip(b).fold(0.0f64, |s, (x, y)| s.max((x - y).abs()));
    let (mut dm, mut du, mut dl) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..runs.len() {
        for j in i + 1..runs.len() {
            dm = dm.max(sup(&runs[i].m, &runs[j].m));
            du = du.max(sup(&runs[i].u, &runs[j].u));
            dl = dl.max((runs[i].lambda - runs[j].lambda).abs());
        }
    }
    let convex = Coupling::new(problem.coupling, problem.op)?.is_convex();
    let limit = 10.0 * params.tol_change;
    Ok(UniquenessReport {
        trials,
        m_spread: dm,
        u_spread: du,
        lambda_spread: dl,
        all_converged: runs.iter().all(|r| r.converged),
        pass: convex.then_some(dm <= limit && du <= limit),
    })
}
