//! Several interacting populations.
//!
//! Population `i` feels the linear local interaction
//! `f^i(x, ζ) = Σ_j S_ij ζ_j`. When `S` is symmetric the system derives from
//! the potential `F(ζ) = ½ ζᵀ S ζ` and can be solved jointly, optionally under
//! a shared density cap `Σ_i α_i m_i ≤ κ`. Any `S` with a nonnegative
//! diagonal can be treated by the damped best-response iteration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupling::{Coupling, CouplingSpec};
use crate::discretization::{ConstraintOperator, DiscreteField, DiscreteVectorField};
use crate::error::{MfgError, Result};
use crate::hamiltonian::HamiltonianModel;
use crate::kinetic::bq_value;
use crate::solver::{
    check_kappa, solve_p1_from, Cap, Engine, Initialization, Smooth, SolveResult, SolverParams, WarmStart,
};
use crate::verify::{certify_weighted, ProblemContext, ResidualReport, ACTIVE_FRACTION};

/// Shared cap `Σ_i α_i m_i ≤ κ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedConstraint {
    pub kappa: DiscreteField,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MultiPopSpec {
    pub hamiltonians: Vec<HamiltonianModel>,
    /// Row `i` holds the coefficients of `f^i`.
    pub interaction: Vec<Vec<f64>>,
    pub constraint: Option<SharedConstraint>,
}

/// Evidence that the shared cap leaves room for every population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityWitness {
    pub alpha_sum: f64,
    /// `⟨ω, κ⟩`.
    pub kappa_mass: f64,
    /// `min_x (κ − Σ α_i m̂_i)` for `m̂_i = κ / ⟨ω, κ⟩`.
    pub min_slack: f64,
    pub pass: bool,
}

const SYMMETRY_TOL: f64 = 1e-12;

impl MultiPopSpec {
    pub fn new(hamiltonians: Vec<HamiltonianModel>, interaction: Vec<Vec<f64>>) -> Result<Self> {
        let spec = Self { hamiltonians, interaction, constraint: None };
        spec.check_shape()?;
        Ok(spec)
    }

    pub fn with_constraint(mut self, kappa: DiscreteField, alpha: Vec<f64>) -> Self {
        self.constraint = Some(SharedConstraint { kappa, alpha });
        self
    }

    pub fn populations(&self) -> usize {
        self.hamiltonians.len()
    }

    fn check_shape(&self) -> Result<()> {
        let n = self.populations();
        if n < 2 {
            return Err(MfgError::InvalidInput("at least two populations are required".into()));
        }
        if self.interaction.len() != n || self.interaction.iter().any(|r| r.len() != n) {
            return Err(MfgError::InvalidInput(format!("interaction matrix must be {n}x{n}")));
        }
        if self.interaction.iter().flatten().any(|v| !v.is_finite()) {
            return Err(MfgError::InvalidInput("interaction matrix must be finite".into()));
        }
        Ok(())
    }

    /// Whether `f^i = ∂_{ζ_i} F` for the quadratic potential.
    pub fn is_potential(&self) -> bool {
        let s = &self.interaction;
        let scale = s.iter().flatten().fold(1.0f64, |a, v| a.max(v.abs()));
        (0..s.len()).all(|i| (0..i).all(|j| (s[i][j] - s[j][i]).abs() <= SYMMETRY_TOL * scale))
    }

    /// Largest mismatch between `f^i` and a central difference of `F` in
    /// `ζ_i` at random points of `[0, 2]^N`.
    pub fn potential_defect(&self, samples: usize, seed: u64) -> f64 {
        let n = self.populations();
        let s = &self.interaction;
        let pot = |z: &[f64]| -> f64 {
            0.5 * (0..n).map(|i| (0..n).map(|j| s[i][j] * z[i] * z[j]).sum::<f64>()).sum::<f64>()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for _ in 0..samples {
            let z: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
            for i in 0..n {
                let (mut zp, mut zm) = (z.clone(), z.clone());
                zp[i] += h;
                zm[i] -= h;
                let fd = (pot(&zp) - pot(&zm)) / (2.0 * h);
                let f: f64 = (0..n).map(|j| s[i][j] * z[j]).sum();
                worst = worst.max((fd - f).abs() / (1.0 + f.abs()));
            }
        }
        worst
    }

    /// `f^i(x, m_1(x), …, m_N(x))` at every node.
    pub fn coupling_values(&self, i: usize, ms: &[DiscreteField]) -> DiscreteField {
        let n = ms[0].len();
        (0..n).map(|k| (0..self.populations()).map(|j| self.interaction[i][j] * ms[j][k]).sum()).collect::<Vec<_>>().into()
    }

    /// The coupling population `i` sees with every other density frozen.
    pub fn frozen_coupling(&self, i: usize, ms: &[DiscreteField]) -> CouplingSpec {
        let n = ms[0].len();
        let offset = (0..n)
            .map(|k| (0..self.populations()).filter(|&j| j != i).map(|j| self.interaction[i][j] * ms[j][k]).sum())
            .collect();
        CouplingSpec::Frozen { self_coeff: self.interaction[i][i], offset }
    }

    /// Checks `α_i ≥ 0`, some `α_i > 0`, `Σα_i < ⟨ω, κ⟩` and `κ > 0`, and
    /// evaluates the reference point `m̂_i = κ / ⟨ω, κ⟩`.
    pub fn feasibility_witness(&self, op: &ConstraintOperator) -> Result<FeasibilityWitness> {
        let c = self
            .constraint
            .as_ref()
            .ok_or_else(|| MfgError::InvalidInput("no shared constraint is configured".into()))?;
        if c.alpha.len() != self.populations() {
            return Err(MfgError::InvalidInput("one weight per population is required".into()));
        }
        if c.alpha.iter().any(|a| !(*a >= 0.0 && a.is_finite())) || !c.alpha.iter().any(|a| *a > 0.0) {
            return Err(MfgError::InfeasibleKappa("weights must be nonnegative and not all zero".into()));
        }
        let alpha_sum: f64 = c.alpha.iter().sum();
        check_kappa(op, &c.kappa, alpha_sum)?;
        let kappa_mass = op.integrate(&c.kappa);
        let min_slack = c.kappa.iter().map(|k| k - alpha_sum * k / kappa_mass).fold(f64::INFINITY, f64::min);
        Ok(FeasibilityWitness { alpha_sum, kappa_mass, min_slack, pass: min_slack > 0.0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BestResponseParams {
    /// Relaxation `θ` of the joint update `(m, w) ← θ (m, w)_new + (1 − θ)(m, w)_old`.
    pub damping: f64,
    pub max_outer: usize,
}

impl Default for BestResponseParams {
    fn default() -> Self {
        Self { damping: 0.5, max_outer: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointRecord {
    pub outer: usize,
    /// `‖m_i^new − m_i^old‖_∞` per population.
    pub change: Vec<f64>,
    pub inner_iterations: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BestResponseOutput {
    /// Last best response of every population.
    pub populations: Vec<SolveResult>,
    pub history: Vec<FixedPointRecord>,
    pub outer_iterations: usize,
    /// `false` when the outer loop hit its limit; the last iterate is still returned.
    pub converged: bool,
}

/// Damped Jacobi best-response iteration. Each sweep freezes the other
/// densities, solves every population's problem in parallel, and relaxes.
pub fn solve_best_response(
    spec: &MultiPopSpec,
    op: &ConstraintOperator,
    params: &SolverParams,
    br: &BestResponseParams,
) -> Result<BestResponseOutput> {
    spec.check_shape()?;
    if spec.constraint.is_some() {
        return Err(MfgError::InvalidInput("best response does not support the shared constraint".into()));
    }
    if let Some(i) = (0..spec.populations()).find(|&i| spec.interaction[i][i] < 0.0) {
        return Err(MfgError::InvalidInput(format!("f^{} must be non-decreasing in its own density", i + 1)));
    }
    if !(br.damping > 0.0 && br.damping <= 1.0) {
        return Err(MfgError::InvalidInput("damping must lie in (0, 1]".into()));
    }
    if br.max_outer == 0 {
        return Err(MfgError::InvalidInput("max_outer must be positive".into()));
    }
    let np = spec.populations();
    let n = op.node_count();
    let area = op.grid().area();
    let theta = br.damping;
    let mut ms: Vec<DiscreteField> = vec![DiscreteField::constant(n, 1.0 / area); np];
    let mut ws: Vec<DiscreteVectorField> = vec![DiscreteVectorField::zeros(n); np];
    let mut last: Option<Vec<SolveResult>> = None;
    let mut history = Vec::new();
    let mut converged = false;

    for outer in 1..=br.max_outer {
        let results: Vec<SolveResult> = (0..np)
            .into_par_iter()
            .map(|i| {
                let coupling = spec.frozen_coupling(i, &ms);
                let init = match &last {
                    None => Initialization::Uniform,
                    Some(prev) => Initialization::Warm(vec![WarmStart {
                        m: ms[i].0.clone(),
                        w: ws[i].0.clone(),
                        u: prev[i].u.0.clone(),
                        lambda: prev[i].lambda,
                    }]),
                };
                solve_p1_from(&spec.hamiltonians[i], &coupling, op, params, &init)
            })
            .collect::<Result<_>>()?;
        let mut change = Vec::with_capacity(np);
        for (i, r) in results.iter().enumerate() {
            change.push(r.m.iter().zip(ms[i].iter()).fold(0.0f64, |a, (x, y)| a.max((x - y).abs())));
            for k in 0..n {
                ms[i][k] = theta * r.m[k] + (1.0 - theta) * ms[i][k];
                ws[i][k][0] = theta * r.w[k][0] + (1.0 - theta) * ws[i][k][0];
                ws[i][k][1] = theta * r.w[k][1] + (1.0 - theta) * ws[i][k][1];
            }
        }
        let worst = change.iter().copied().fold(0.0, f64::max);
        history.push(FixedPointRecord {
            outer,
            change,
            inner_iterations: results.iter().map(|r| r.iterations).collect(),
        });
        last = Some(results);
        if worst <= params.tol_change {
            converged = true;
            break;
        }
    }
    let mut populations = last.expect("at least one sweep runs");
    certify_populations(spec, op, &mut populations)?;
    Ok(BestResponseOutput {
        populations,
        outer_iterations: history.len(),
        history,
        converged,
    })
}

/// `∫ ½ ζᵀ S ζ` over stacked densities.
struct QuadraticInteraction<'a> {
    s: &'a [Vec<f64>],
}

impl Smooth for QuadraticInteraction<'_> {
    fn value(&self, op: &ConstraintOperator, m: &[Vec<f64>]) -> f64 {
        let n = op.node_count();
        let per: Vec<f64> = (0..n)
            .map(|k| {
                let mut v = 0.0;
                for (i, row) in self.s.iter().enumerate() {
                    for (j, sij) in row.iter().enumerate() {
                        v += sij * m[i][k] * m[j][k];
                    }
                }
                0.5 * v
            })
            .collect();
        op.integrate(&per)
    }

    fn gradient(&self, op: &ConstraintOperator, m: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = op.node_count();
        self.s
            .iter()
            .map(|row| (0..n).map(|k| row.iter().zip(m).map(|(sij, mj)| sij * mj[k]).sum()).collect())
            .collect()
    }

    fn lipschitz(&self, _: &ConstraintOperator, _: f64) -> f64 {
        symmetric_eigenvalues(self.s).iter().fold(0.0f64, |a, e| a.max(e.abs()))
    }

    fn convex(&self) -> bool {
        let scale = self.s.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
        symmetric_eigenvalues(self.s).iter().all(|e| *e >= -1e-12 * scale)
    }
}

/// Eigenvalues of a small symmetric matrix by cyclic Jacobi rotations.
fn symmetric_eigenvalues(s: &[Vec<f64>]) -> Vec<f64> {
    let n = s.len();
    let mut a: Vec<Vec<f64>> = s.to_vec();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off <= 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - sn * akq;
                    a[k][q] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - sn * aqk;
                    a[q][k] = sn * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

/// Residuals of the shared cap.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SharedConstraintReport {
    /// `|Σ ω p (κ − Σ α_i m_i)|`.
    pub complementarity: f64,
    /// Largest `κ − Σ α_i m_i` over nodes with `p > 10⁻⁶‖p‖_∞`.
    pub support_violation: f64,
    /// Largest `Σ α_i m_i − κ`, clipped at zero.
    pub bound_violation: f64,
    pub active_nodes: usize,
    pub min_p: f64,
    pub witness: Option<FeasibilityWitness>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PotentialOutput {
    /// Each population carries the shared `p` when constrained.
    pub populations: Vec<SolveResult>,
    pub p: Option<DiscreteField>,
    /// `Σ_i ∫ b_q(m_i, w_i) + ∫ F(m_1, …, m_N)`.
    pub objective: f64,
    pub shared: Option<SharedConstraintReport>,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes the joint potential over all populations at once.
pub fn solve_potential(spec: &MultiPopSpec, op: &ConstraintOperator, params: &SolverParams) -> Result<PotentialOutput> {
    solve_potential_from(spec, op, params, &Initialization::Uniform)
}

pub fn solve_potential_from(
    spec: &MultiPopSpec,
    op: &ConstraintOperator,
    params: &SolverParams,
    init: &Initialization,
) -> Result<PotentialOutput> {
    spec.check_shape()?;
    if !spec.is_potential() {
        return Err(MfgError::InvalidInput("the interaction matrix must be symmetric for a potential".into()));
    }
    if spec.constraint.is_some() {
        spec.feasibility_witness(op)?;
    }
    let smooth = QuadraticInteraction { s: &spec.interaction };
    let cap = spec.constraint.as_ref().map(|c| Cap { kappa: &c.kappa, alpha: &c.alpha });
    let engine = Engine { op, models: &spec.hamiltonians, smooth: &smooth, cap };
    let out = engine.run(params, init)?;

    let n = op.node_count();
    let g = op.grid();
    let mut objective = smooth.value(op, &out.m);
    let ms: Vec<DiscreteField> = out.m.iter().cloned().map(DiscreteField).collect();
    let mut populations = Vec::with_capacity(spec.populations());
    for (i, model) in spec.hamiltonians.iter().enumerate() {
        let kinetic: f64 = (0..n).map(|k| op.weights()[k] * bq_value(&model.at(g.node(k)), ms[i][k], out.w[i][k])).sum();
        objective += kinetic;
        let frozen = Coupling::new(&spec.frozen_coupling(i, &ms), op)?.value(op, &ms[i]);
        populations.push(SolveResult {
            m: ms[i].clone(),
            w: DiscreteVectorField(out.w[i].clone()),
            u: DiscreteField(out.u[i].clone()),
            lambda: out.lambda[i],
            p: out.p.clone().map(DiscreteField),
            objective: kinetic + frozen,
            residuals: ResidualReport::default(),
            iterations: out.iterations,
            converged: out.converged,
            step: out.step,
            history: out.history.clone(),
        });
    }
    let shared = certify_populations(spec, op, &mut populations)?;
    let p = out.p.map(DiscreteField);
    Ok(PotentialOutput { populations, p, objective, shared, iterations: out.iterations, converged: out.converged })
}

/// Recomputes every population's residuals from its returned fields, with
/// the other densities frozen at their returned values, and the residuals of
/// the shared cap when one is configured.
pub fn certify_populations(
    spec: &MultiPopSpec,
    op: &ConstraintOperator,
    populations: &mut [SolveResult],
) -> Result<Option<SharedConstraintReport>> {
    spec.check_shape()?;
    let np = spec.populations();
    if populations.len() != np {
        return Err(MfgError::InvalidInput(format!("expected {np} populations, got {}", populations.len())));
    }
    let n = op.node_count();
    let ms: Vec<DiscreteField> = populations.iter().map(|r| r.m.clone()).collect();
    for (i, result) in populations.iter_mut().enumerate() {
        let frozen = Coupling::new(&spec.frozen_coupling(i, &ms), op)?;
        let (alpha, kappa) = match &spec.constraint {
            Some(c) if c.alpha[i] > 0.0 => {
                // Population i sees the cap α_i m_i ≤ κ − Σ_{j≠i} α_j m_j.
                let eff: DiscreteField = (0..n)
                    .map(|k| {
                        let others: f64 = (0..np).filter(|&j| j != i).map(|j| c.alpha[j] * ms[j][k]).sum();
                        (c.kappa[k] - others) / c.alpha[i]
                    })
                    .collect::<Vec<_>>()
                    .into();
                (c.alpha[i], Some(eff))
            }
            _ => (0.0, None),
        };
        let model = &spec.hamiltonians[i];
        let ctx = ProblemContext { model, coupling: &frozen, op, kappa: kappa.as_ref() };
        result.residuals = certify_weighted(result, &ctx, alpha)?;
    }

    let Some(c) = spec.constraint.as_ref() else { return Ok(None) };
    let witness = Some(spec.feasibility_witness(op)?);
    let p = populations[0]
        .p
        .as_ref()
        .ok_or_else(|| MfgError::InvalidInput("a capped result must carry the pressure".into()))?;
    let w8 = op.weights();
    let p_max = p.max_abs();
    let mut rep = SharedConstraintReport { min_p: p.min(), witness, ..Default::default() };
    let mut comp = 0.0;
    for k in 0..n {
        let load: f64 = (0..np).map(|i| c.alpha[i] * ms[i][k]).sum();
        let slack = c.kappa[k] - load;
        comp += w8[k] * p[k] * slack;
        rep.bound_violation = rep.bound_violation.max(-slack);
        if p_max > 0.0 && p[k] > ACTIVE_FRACTION * p_max {
            rep.active_nodes += 1;
            rep.support_violation = rep.support_violation.max(slack);
        }
    }
    rep.complementarity = comp.abs();
    Ok(Some(rep))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_eigenvalues_of_small_matrices() {
        let mut e = symmetric_eigenvalues(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
        e.sort_by(f64::total_cmp);
        assert!((e[0] - 1.0).abs() < 1e-14 && (e[1] - 3.0).abs() < 1e-14);
        let mut e = symmetric_eigenvalues(&[vec![1.0, 1.0, 0.0], vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 5.0]]);
        e.sort_by(f64::total_cmp);
        assert!(e[0].abs() < 1e-14 && (e[1] - 2.0).abs() < 1e-14 && (e[2] - 5.0).abs() < 1e-14);
    }

    #[test]
    fn symmetric_interaction_has_zero_potential_defect() {
        let h = HamiltonianModel::isotropic(1.5, [1.0, 1.0]).unwrap();
        let spec = MultiPopSpec::new(vec![h.clone(), h], vec![vec![1.0, 0.5], vec![0.5, 2.0]]).unwrap();
        assert!(spec.is_potential());
        assert!(spec.potential_defect(50, 1) < 1e-8);
        let h = HamiltonianModel::isotropic(1.5, [1.0, 1.0]).unwrap();
        let skew = MultiPopSpec::new(vec![h.clone(), h], vec![vec![1.0, 0.5], vec![-0.5, 1.0]]).unwrap();
        assert!(!skew.is_potential());
        assert!(skew.potential_defect(50, 1) > 1e-2);
    }
}
