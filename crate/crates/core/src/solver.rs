//! Three-operator splitting for the discretized variational problems
//!
//! ```text
//!   min  Σ_b [ Σ_i ω_i b_q(x_i, m_bi, w_bi) ]  +  ℱ(m_1, …, m_N)
//!   s.t. A m_b + B w_b = 0,  ⟨ω, m_b⟩ = 1          for every block b
//!        Σ_b α_b m_b ≤ κ                           (optional)
//! ```
//!
//! The iteration (Davis–Yin, in the metric weighted by ω) alternates an exact
//! projection onto the affine constraints, a nodewise prox of the kinetic
//! term (capped when a density bound is present), and an explicit gradient
//! step on the coupling. At a fixed point the projection multipliers give
//! `u = −μ₁/γ`, `λ = −μ₂/γ`, and the cap multiplier returned by the prox is
//! the congestion pressure `p`, so the discrete first-order system
//!
//! ```text
//!   (A u)_i / ω_i + H(x_i, ∇_h u_i) + λ − α p_i = g_i,    w = −m ∇_ξ H(∇_h u)
//! ```
//!
//! holds exactly; it is monitored as the stopping test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupling::{Coupling, CouplingSpec};
use crate::discretization::{ConstraintOperator, DiscreteField, DiscreteVectorField};
use crate::error::{MfgError, Result};
use crate::hamiltonian::{norm2, HamiltonianModel, PointHamiltonian, Vec2};
use crate::kinetic::{bq_value, prox_bq, prox_bq_capped, KineticSample};
use crate::verify::{certify, ProblemContext, ResidualReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverParams {
    pub max_iters: usize,
    /// Splitting step `γ`; `None` picks it from the coupling's Lipschitz bound.
    pub step: Option<f64>,
    /// Relaxation `ρ ∈ (0, 2)`.
    pub relaxation: f64,
    pub tol_pde: f64,
    pub tol_kkt: f64,
    pub tol_change: f64,
    /// Densities at or below this are excluded from the HJB residual.
    pub positivity_guard: f64,
    /// Step scaling applied when the coupling is not convex.
    pub damping: f64,
    /// Residuals are evaluated every this many iterations.
    pub check_every: usize,
    /// Anderson acceleration memory; 0 disables acceleration.
    pub anderson_memory: usize,
    pub record_history: bool,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            max_iters: 20_000,
            step: None,
            relaxation: 1.0,
            tol_pde: 1e-10,
            tol_kkt: 1e-6,
            tol_change: 1e-7,
            positivity_guard: 1e-12,
            damping: 0.5,
            check_every: 10,
            anderson_memory: 5,
            record_history: false,
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MfgError::InvalidInput(m.into()));
        if self.max_iters == 0 {
            return bad("max_iters must be positive");
        }
        if let Some(s) = self.step {
            if !(s > 0.0 && s.is_finite()) {
                return bad("step must be positive");
            }
        }
        if !(self.relaxation > 0.0 && self.relaxation < 2.0) {
            return bad("relaxation must lie in (0, 2)");
        }
        if !(self.tol_pde > 0.0 && self.tol_kkt > 0.0 && self.tol_change > 0.0) {
            return bad("tolerances must be positive");
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return bad("damping must lie in (0, 1]");
        }
        if self.check_every == 0 {
            return bad("check_every must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub pde_residual: f64,
    pub kkt_residual: f64,
    pub drift_residual: f64,
    pub step: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveResult {
    pub m: DiscreteField,
    pub w: DiscreteVectorField,
    /// Zero weighted mean.
    pub u: DiscreteField,
    pub lambda: f64,
    /// Present for density-constrained problems.
    pub p: Option<DiscreteField>,
    pub objective: f64,
    pub residuals: ResidualReport,
    pub iterations: usize,
    pub converged: bool,
    pub step: f64,
    pub history: Vec<IterationRecord>,
}

/// Starting point of a solve.
#[derive(Debug, Clone, Default)]
pub enum Initialization {
    /// `m ≡ 1/|Ω|`, `w ≡ 0`, multipliers 0.
    #[default]
    Uniform,
    /// Positive random density and random momentum, multipliers 0.
    Random { seed: u64, scale: f64 },
    /// Primal point and multipliers from an earlier solve, one per block.
    Warm(Vec<WarmStart>),
}

#[derive(Debug, Clone)]
pub struct WarmStart {
    pub m: Vec<f64>,
    pub w: Vec<Vec2>,
    pub u: Vec<f64>,
    pub lambda: f64,
}

impl From<&SolveResult> for WarmStart {
    fn from(r: &SolveResult) -> Self {
        Self { m: r.m.0.clone(), w: r.w.0.clone(), u: r.u.0.clone(), lambda: r.lambda }
    }
}

/// Smooth part of the objective over stacked blocks of densities.
pub(crate) trait Smooth: Sync {
    fn value(&self, op: &ConstraintOperator, m: &[Vec<f64>]) -> f64;
    /// Representers in the `ω` inner product, one per block.
    fn gradient(&self, op: &ConstraintOperator, m: &[Vec<f64>]) -> Vec<Vec<f64>>;
    fn lipschitz(&self, op: &ConstraintOperator, m_bound: f64) -> f64;
    fn convex(&self) -> bool;
}

impl Smooth for Coupling {
    fn value(&self, op: &ConstraintOperator, m: &[Vec<f64>]) -> f64 {
        Coupling::value(self, op, &m[0])
    }
    fn gradient(&self, op: &ConstraintOperator, m: &[Vec<f64>]) -> Vec<Vec<f64>> {
        vec![self.derivative(op, &m[0]).into_inner()]
    }
    fn lipschitz(&self, op: &ConstraintOperator, m_bound: f64) -> f64 {
        Coupling::lipschitz(self, op, m_bound)
    }
    fn convex(&self) -> bool {
        self.is_convex()
    }
}

/// Density cap `Σ_b α_b m_b ≤ κ`.
pub(crate) struct Cap<'a> {
    pub kappa: &'a [f64],
    pub alpha: &'a [f64],
}

pub(crate) struct Engine<'a> {
    pub op: &'a ConstraintOperator,
    pub models: &'a [HamiltonianModel],
    pub smooth: &'a dyn Smooth,
    pub cap: Option<Cap<'a>>,
}

#[derive(Debug, Clone)]
pub(crate) struct EngineOutput {
    pub m: Vec<Vec<f64>>,
    pub w: Vec<Vec<Vec2>>,
    pub u: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    pub p: Option<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
    pub step: f64,
    pub history: Vec<IterationRecord>,
}

#[derive(Clone)]
struct Blocks {
    m: Vec<Vec<f64>>,
    w: Vec<Vec<Vec2>>,
}

struct Projection {
    z: Blocks,
    mu1: Vec<Vec<f64>>,
    mu2: Vec<f64>,
}

/// Nodes per rayon task in the pointwise loops.
const PAR_CHUNK: usize = 512;

impl<'a> Engine<'a> {
    fn blocks(&self) -> usize {
        self.models.len()
    }

    fn n(&self) -> usize {
        self.op.node_count()
    }

    fn point_hamiltonians(&self) -> Vec<Vec<PointHamiltonian>> {
        let g = self.op.grid();
        self.models
            .iter()
            .map(|mdl| (0..self.n()).map(|k| mdl.at(g.node(k))).collect())
            .collect()
    }

    /// Exact `ω`-metric projection of every block onto its affine constraints.
    fn project(&self, v: &Blocks) -> Result<Projection> {
        let op = self.op;
        let area = op.grid().area();
        let w8 = op.weights();
        let mut z = v.clone();
        let mut mu1 = Vec::with_capacity(self.blocks());
        let mut mu2 = Vec::with_capacity(self.blocks());
        for b in 0..self.blocks() {
            let wv: DiscreteVectorField = v.w[b].clone().into();
            let am = op.apply_a(&v.m[b]);
            let bw = op.apply_b(&wv);
            let r: Vec<f64> = am.iter().zip(&bw).map(|(a, c)| a + c).collect();
            let mu = op.solve_projection(&r)?;
            let nu = (op.integrate(&v.m[b]) - 1.0) / area;
            let amu = op.apply_a(&mu);
            let btmu = op.apply_bt(&mu);
            for k in 0..self.n() {
                z.m[b][k] -= amu[k] / w8[k] + nu;
                z.w[b][k][0] -= btmu[k][0] / w8[k];
                z.w[b][k][1] -= btmu[k][1] / w8[k];
            }
            mu1.push(mu);
            mu2.push(nu);
        }
        Ok(Projection { z, mu1, mu2 })
    }

    /// Nodewise prox of the kinetic term (with the cap when present).
    fn prox(&self, hams: &[Vec<PointHamiltonian>], gamma: f64, zhat: &Blocks) -> Result<(Blocks, Vec<f64>)> {
        let nb = self.blocks();
        let n = self.n();
        let mut flat = vec![KineticSample::ZERO; n * nb];
        let mut p = vec![0.0; n];
        flat.par_chunks_mut(nb)
            .zip(p.par_iter_mut())
            .enumerate()
            .with_min_len(PAR_CHUNK)
            .try_for_each(|(k, (out, pk))| -> Result<()> {
                match &self.cap {
                    None => {
                        for b in 0..nb {
                            out[b] = prox_bq(&hams[b][k], gamma, zhat.m[b][k], zhat.w[b][k])?;
                        }
                    }
                    Some(cap) => {
                        let hs: Vec<PointHamiltonian> = (0..nb).map(|b| hams[b][k]).collect();
                        let inputs: Vec<KineticSample> =
                            (0..nb).map(|b| KineticSample::new(zhat.m[b][k], zhat.w[b][k])).collect();
                        *pk = prox_bq_capped(&hs, gamma, &inputs, cap.alpha, cap.kappa[k], out)?;
                    }
                }
                Ok(())
            })?;
        let mut z = Blocks { m: vec![vec![0.0; n]; nb], w: vec![vec![[0.0, 0.0]; n]; nb] };
        for k in 0..n {
            for b in 0..nb {
                let s = flat[k * nb + b];
                z.m[b][k] = s.m;
                z.w[b][k] = s.w;
            }
        }
        Ok((z, p))
    }

    fn kinetic_total(&self, hams: &[Vec<PointHamiltonian>], z: &Blocks) -> f64 {
        let w8 = self.op.weights();
        (0..self.blocks())
            .map(|b| (0..self.n()).map(|k| w8[k] * bq_value(&hams[b][k], z.m[b][k], z.w[b][k])).sum::<f64>())
            .sum()
    }

    fn initial_point(&self, init: &Initialization, gamma: f64) -> Result<Blocks> {
        let n = self.n();
        let nb = self.blocks();
        let area = self.op.grid().area();
        match init {
            Initialization::Uniform => {
                Ok(Blocks { m: vec![vec![1.0 / area; n]; nb], w: vec![vec![[0.0, 0.0]; n]; nb] })
            }
            Initialization::Random { seed, scale } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut z = Blocks { m: Vec::new(), w: Vec::new() };
                for _ in 0..nb {
                    let m: Vec<f64> =
                        (0..n).map(|_| (1.0 + scale * rng.random_range(-0.5..0.5)).max(0.0) / area).collect();
                    let w: Vec<Vec2> = (0..n)
                        .map(|_| [scale * rng.random_range(-0.5..0.5), scale * rng.random_range(-0.5..0.5)])
                        .collect();
                    z.m.push(m);
                    z.w.push(w);
                }
                Ok(z)
            }
            Initialization::Warm(starts) => {
                if starts.len() != nb || starts.iter().any(|s| s.m.len() != n || s.w.len() != n || s.u.len() != n) {
                    return Err(MfgError::InvalidInput("warm start does not match the problem size".into()));
                }
                let w8 = self.op.weights();
                let mut z = Blocks { m: Vec::new(), w: Vec::new() };
                for s in starts {
                    // v = z − γ Ω⁻¹Kᵀ(u, λ) reproduces the multipliers at the first projection.
                    let au = self.op.apply_a(&s.u);
                    let btu = self.op.apply_bt(&s.u);
                    z.m.push((0..n).map(|k| s.m[k] - gamma * (au[k] / w8[k] + s.lambda)).collect());
                    z.w.push(
                        (0..n)
                            .map(|k| {
                                [s.w[k][0] - gamma * btu[k][0] / w8[k], s.w[k][1] - gamma * btu[k][1] / w8[k]]
                            })
                            .collect(),
                    );
                }
                Ok(z)
            }
        }
    }

    /// Multipliers `(u, λ)` of each block from the projection, `u` with zero mean.
    fn multipliers(&self, proj: &Projection, gamma: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let area = self.op.grid().area();
        let us = proj
            .mu1
            .iter()
            .map(|mu| {
                let mut u: Vec<f64> = mu.iter().map(|v| -v / gamma).collect();
                let mean = self.op.integrate(&u) / area;
                u.iter_mut().for_each(|v| *v -= mean);
                u
            })
            .collect();
        let lambdas = proj.mu2.iter().map(|v| -v / gamma).collect();
        (us, lambdas)
    }

    /// Largest HJB residual over nodes with `m > guard`, and the relative
    /// drift mismatch, maximized over blocks.
    #[allow(clippy::too_many_arguments)]
    fn kkt(
        &self,
        hams: &[Vec<PointHamiltonian>],
        z: &Blocks,
        us: &[Vec<f64>],
        lambdas: &[f64],
        p: &[f64],
        grad: &[Vec<f64>],
        guard: f64,
    ) -> (f64, f64) {
        let op = self.op;
        let w8 = op.weights();
        let mut kkt: f64 = 0.0;
        let mut drift: f64 = 0.0;
        for b in 0..self.blocks() {
            let q = self.models[b].q();
            let au = op.apply_a(&us[b]);
            let du = op.nodal_gradient(&us[b]);
            let alpha = self.cap.as_ref().map_or(0.0, |c| c.alpha[b]);
            let mut num = 0.0;
            let mut den = 0.0;
            for k in 0..self.n() {
                let h = &hams[b][k];
                if z.m[b][k] > guard {
                    let r = au[k] / w8[k] + h.value(du[k]) + lambdas[b] - alpha * p[k] - grad[b][k];
                    kkt = kkt.max(r.abs());
                }
                let gh = h.grad(du[k]);
                let e = [z.w[b][k][0] + z.m[b][k] * gh[0], z.w[b][k][1] + z.m[b][k] * gh[1]];
                num += w8[k] * norm2(e).powf(q);
                den += w8[k] * norm2(z.w[b][k]).powf(q);
            }
            drift = drift.max(num.powf(1.0 / q) / (1.0 + den.powf(1.0 / q)));
        }
        (kkt, drift)
    }

    /// One splitting step from `v`: projection, gradient, prox. Returns
    /// `None` when the descent test fails for the current step.
    fn step(&self, hams: &[Vec<PointHamiltonian>], v: &Blocks, gamma: f64) -> Result<Option<Evaluation>> {
        let op = self.op;
        let (nb, n) = (self.blocks(), self.n());
        let w8 = op.weights();
        let proj = self.project(v)?;
        let zg = &proj.z;
        let grad = self.smooth.gradient(op, &zg.m);
        let mut zhat = zg.clone();
        for b in 0..nb {
            for k in 0..n {
                zhat.m[b][k] = 2.0 * zg.m[b][k] - v.m[b][k] - gamma * grad[b][k];
                zhat.w[b][k][0] = 2.0 * zg.w[b][k][0] - v.w[b][k][0];
                zhat.w[b][k][1] = 2.0 * zg.w[b][k][1] - v.w[b][k][1];
            }
        }
        let (zf, p) = self.prox(hams, gamma, &zhat)?;
        // Descent lemma for the smooth part along z_f − z_g.
        let (mut lin, mut sq) = (0.0, 0.0);
        for b in 0..nb {
            for k in 0..n {
                let d = zf.m[b][k] - zg.m[b][k];
                lin += w8[k] * grad[b][k] * d;
                sq += w8[k] * d * d;
            }
        }
        let h_g = self.smooth.value(op, &zg.m);
        let h_f = self.smooth.value(op, &zf.m);
        if h_f > h_g + lin + sq / (2.0 * gamma) + 1e-12 * (1.0 + h_f.abs()) {
            return Ok(None);
        }
        Ok(Some(Evaluation { proj, grad, zf, p }))
    }

    pub fn run(&self, params: &SolverParams, init: &Initialization) -> Result<EngineOutput> {
        params.validate()?;
        let op = self.op;
        let nb = self.blocks();
        let n = self.n();
        let hams = self.point_hamiltonians();
        let area = op.grid().area();

        let m_bound = match &self.cap {
            Some(c) => c.kappa.iter().copied().fold(0.0, f64::max),
            None => 4.0 / area,
        };
        let lip = self.smooth.lipschitz(op, m_bound);
        let mut gamma = match params.step {
            Some(s) => s,
            None => {
                let base = if lip > 0.0 { 1.0 / lip } else { f64::INFINITY };
                let base = if self.smooth.convex() { base } else { params.damping * base };
                let cap = if self.cap.is_some() { CAPPED_STEP } else { DEFAULT_STEP };
                base.min(cap)
            }
        };

        let mut v = self.initial_point(init, gamma)?;
        let mut accel = Anderson::new(params.anderson_memory, op.weights(), nb);
        let mut history = Vec::new();
        let mut converged = false;
        let mut iterations = 0;
        let mut last_p = vec![0.0; n];

        while iterations < params.max_iters {
            iterations += 1;
            let ev = match self.step(&hams, &v, gamma)? {
                Some(ev) => ev,
                None => {
                    gamma *= 0.5;
                    if gamma < MIN_STEP {
                        return Err(MfgError::StepSizeFailure { step: gamma });
                    }
                    // Keep the multipliers (v − z_g)/γ unchanged.
                    let zg = self.project(&v)?.z;
                    for b in 0..nb {
                        for k in 0..n {
                            v.m[b][k] = zg.m[b][k] + 0.5 * (v.m[b][k] - zg.m[b][k]);
                            v.w[b][k][0] = zg.w[b][k][0] + 0.5 * (v.w[b][k][0] - zg.w[b][k][0]);
                            v.w[b][k][1] = zg.w[b][k][1] + 0.5 * (v.w[b][k][1] - zg.w[b][k][1]);
                        }
                    }
                    accel.reset();
                    continue;
                }
            };
            let zg = &ev.proj.z;
            last_p = ev.p.clone();

            let check = iterations % params.check_every == 0 || iterations == params.max_iters;
            if check {
                let (us, lambdas) = self.multipliers(&ev.proj, gamma);
                let (kkt, drift) =
                    self.kkt(&hams, zg, &us, &lambdas, &last_p, &ev.grad, params.positivity_guard);
                if params.record_history {
                    let objective = self.kinetic_total(&hams, &ev.zf) + self.smooth.value(op, &ev.zf.m);
                    let pde = (0..nb)
                        .map(|b| op.fp_residual(&ev.zf.m[b], &ev.zf.w[b].clone().into()))
                        .fold(0.0, f64::max);
                    history.push(IterationRecord {
                        iteration: iterations,
                        objective,
                        pde_residual: pde,
                        kkt_residual: kkt,
                        drift_residual: drift,
                        step: gamma,
                    });
                }
                if kkt <= params.tol_kkt && drift <= params.tol_kkt {
                    converged = true;
                    break;
                }
            }

            // Fixed-point residual of the relaxed map, then the (accelerated) update.
            let rho = params.relaxation;
            let mut f = Blocks { m: vec![vec![0.0; n]; nb], w: vec![vec![[0.0, 0.0]; n]; nb] };
            for b in 0..nb {
                for k in 0..n {
                    f.m[b][k] = rho * (ev.zf.m[b][k] - zg.m[b][k]);
                    f.w[b][k][0] = rho * (ev.zf.w[b][k][0] - zg.w[b][k][0]);
                    f.w[b][k][1] = rho * (ev.zf.w[b][k][1] - zg.w[b][k][1]);
                }
            }
            v = accel.next(v, f);
        }

        // Report the exactly feasible projected point and its multipliers.
        let proj = self.project(&v)?;
        let (u, lambda) = self.multipliers(&proj, gamma);
        let z = proj.z;
        Ok(EngineOutput {
            m: z.m,
            w: z.w,
            u,
            lambda,
            p: self.cap.as_ref().map(|_| last_p),
            iterations,
            converged,
            step: gamma,
            history,
        })
    }
}

struct Evaluation {
    proj: Projection,
    grad: Vec<Vec<f64>>,
    zf: Blocks,
    p: Vec<f64>,
}

/// Type-II Anderson acceleration of `v ↦ v + f(v)` in the `ω` metric, with a
/// residual safeguard: an accelerated point whose residual grows past
/// `SAFEGUARD ×` the previous one is discarded in favour of the plain step.
struct Anderson<'a> {
    memory: usize,
    weights: &'a [f64],
    blocks: usize,
    dv: Vec<Vec<f64>>,
    df: Vec<Vec<f64>>,
    prev: Option<(Vec<f64>, Vec<f64>, f64)>,
    /// Plain step from the previous point, used when a candidate is rejected.
    fallback: Option<Vec<f64>>,
}

const SAFEGUARD: f64 = 2.0;

impl<'a> Anderson<'a> {
    fn new(memory: usize, weights: &'a [f64], blocks: usize) -> Self {
        Self { memory, weights, blocks, dv: Vec::new(), df: Vec::new(), prev: None, fallback: None }
    }

    fn reset(&mut self) {
        self.dv.clear();
        self.df.clear();
        self.prev = None;
        self.fallback = None;
    }

    fn flatten(&self, z: &Blocks) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * self.weights.len() * self.blocks);
        for b in 0..self.blocks {
            out.extend_from_slice(&z.m[b]);
            out.extend(z.w[b].iter().map(|w| w[0]));
            out.extend(z.w[b].iter().map(|w| w[1]));
        }
        out
    }

    fn unflatten(&self, x: &[f64]) -> Blocks {
        let n = self.weights.len();
        let mut z = Blocks { m: Vec::new(), w: Vec::new() };
        for b in 0..self.blocks {
            let s = &x[3 * n * b..3 * n * (b + 1)];
            z.m.push(s[..n].to_vec());
            z.w.push((0..n).map(|k| [s[n + k], s[2 * n + k]]).collect());
        }
        z
    }

    fn dot(&self, a: &[f64], b: &[f64]) -> f64 {
        let n = self.weights.len();
        a.iter().zip(b).enumerate().map(|(i, (x, y))| self.weights[i % n] * x * y).sum()
    }

    fn next(&mut self, v: Blocks, f: Blocks) -> Blocks {
        let x = self.flatten(&v);
        let fx = self.flatten(&f);
        let plain: Vec<f64> = x.iter().zip(&fx).map(|(a, b)| a + b).collect();
        if self.memory == 0 {
            return self.unflatten(&plain);
        }
        let norm = self.dot(&fx, &fx).sqrt();
        if let Some((_, _, prev_norm)) = &self.prev {
            if norm > SAFEGUARD * prev_norm {
                if let Some(fb) = self.fallback.take() {
                    self.dv.clear();
                    self.df.clear();
                    self.prev = None;
                    return self.unflatten(&fb);
                }
            }
        }
        if let Some((px, pf, _)) = self.prev.take() {
            self.dv.push(x.iter().zip(&px).map(|(a, b)| a - b).collect());
            self.df.push(fx.iter().zip(&pf).map(|(a, b)| a - b).collect());
            if self.dv.len() > self.memory {
                self.dv.remove(0);
                self.df.remove(0);
            }
        }
        let k = self.df.len();
        let mut out = plain.clone();
        if k > 0 {
            // Normal equations (ΔFᵀΔF + εI)θ = ΔFᵀf, solved by Gaussian elimination.
            let mut g = vec![vec![0.0; k + 1]; k];
            let mut trace = 0.0;
            for i in 0..k {
                for j in 0..=i {
                    let d = self.dot(&self.df[i], &self.df[j]);
                    g[i][j] = d;
                    g[j][i] = d;
                }
                trace += g[i][i];
                g[i][k] = self.dot(&self.df[i], &fx);
            }
            let reg = 1e-10 * trace.max(f64::MIN_POSITIVE);
            for (i, row) in g.iter_mut().enumerate() {
                row[i] += reg;
            }
            if let Some(theta) = solve_dense(g) {
                for (j, t) in theta.iter().enumerate() {
                    for (i, o) in out.iter_mut().enumerate() {
                        *o -= t * (self.dv[j][i] + self.df[j][i]);
                    }
                }
            }
        }
        self.prev = Some((x, fx, norm));
        self.fallback = Some(plain);
        self.unflatten(&out)
    }
}

/// Gaussian elimination with partial pivoting on an augmented `k × (k+1)` system.
fn solve_dense(mut a: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let k = a.len();
    for c in 0..k {
        let piv = (c..k).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[piv][c].abs() == 0.0 || !a[piv][c].is_finite() {
            return None;
        }
        a.swap(c, piv);
        for r in c + 1..k {
            let f = a[r][c] / a[c][c];
            for j in c..=k {
                a[r][j] -= f * a[c][j];
            }
        }
    }
    let mut x = vec![0.0; k];
    for r in (0..k).rev() {
        let s: f64 = (r + 1..k).map(|j| a[r][j] * x[j]).sum();
        x[r] = (a[r][k] - s) / a[r][r];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Step used when the coupling gives no Lipschitz bound.
const DEFAULT_STEP: f64 = 1.0;
/// Upper bound on the default step when a density cap is present.
const CAPPED_STEP: f64 = 0.15;
const MIN_STEP: f64 = 1e-14;

fn single_result(
    out: EngineOutput,
    model: &HamiltonianModel,
    coupling: &Coupling,
    op: &ConstraintOperator,
    kappa: Option<&DiscreteField>,
) -> Result<SolveResult> {
    let EngineOutput { mut m, mut w, mut u, lambda, p, iterations, converged, step, history } = out;
    let m = DiscreteField(m.remove(0));
    let w = DiscreteVectorField(w.remove(0));
    let u = DiscreteField(u.remove(0));
    let p = p.map(DiscreteField);
    let g = op.grid();
    let kinetic: f64 = (0..op.node_count())
        .map(|k| op.weights()[k] * bq_value(&model.at(g.node(k)), m[k], w[k]))
        .sum();
    let objective = kinetic + coupling.value(op, &m);
    let mut result = SolveResult {
        m,
        w,
        u,
        lambda: lambda[0],
        p,
        objective,
        residuals: ResidualReport::default(),
        iterations,
        converged,
        step,
        history,
    };
    let ctx = ProblemContext { model, coupling, op, kappa };
    result.residuals = certify(&result, &ctx)?;
    Ok(result)
}

/// Solves the unconstrained-density problem.
pub fn solve_p1(
    model: &HamiltonianModel,
    coupling: &CouplingSpec,
    op: &ConstraintOperator,
    params: &SolverParams,
) -> Result<SolveResult> {
    solve_p1_from(model, coupling, op, params, &Initialization::Uniform)
}

pub fn solve_p1_from(
    model: &HamiltonianModel,
    coupling: &CouplingSpec,
    op: &ConstraintOperator,
    params: &SolverParams,
    init: &Initialization,
) -> Result<SolveResult> {
    let c = Coupling::new(coupling, op)?;
    let models = std::slice::from_ref(model);
    let engine = Engine { op, models, smooth: &c, cap: None };
    let out = engine.run(params, init)?;
    single_result(out, model, &c, op, None)
}

/// Checks `min κ > 0` and `⟨ω, κ⟩ > 1`.
pub fn check_kappa(op: &ConstraintOperator, kappa: &[f64], total_weight: f64) -> Result<()> {
    if kappa.len() != op.node_count() {
        return Err(MfgError::InfeasibleKappa("kappa has the wrong number of nodes".into()));
    }
    let min = kappa.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) {
        return Err(MfgError::InfeasibleKappa(format!("min kappa must be positive, got {min}")));
    }
    let mass = op.integrate(kappa);
    if !(mass > total_weight) {
        return Err(MfgError::InfeasibleKappa(format!(
            "integral of kappa ({mass}) must exceed {total_weight}"
        )));
    }
    Ok(())
}

/// Solves the density-constrained problem `m ≤ κ`.
pub fn solve_p2(
    model: &HamiltonianModel,
    coupling: &CouplingSpec,
    op: &ConstraintOperator,
    kappa: &DiscreteField,
    params: &SolverParams,
) -> Result<SolveResult> {
    solve_p2_from(model, coupling, op, kappa, params, &Initialization::Uniform)
}

pub fn solve_p2_from(
    model: &HamiltonianModel,
    coupling: &CouplingSpec,
    op: &ConstraintOperator,
    kappa: &DiscreteField,
    params: &SolverParams,
    init: &Initialization,
) -> Result<SolveResult> {
    check_kappa(op, kappa, 1.0)?;
    let c = Coupling::new(coupling, op)?;
    let models = std::slice::from_ref(model);
    let alpha = [1.0];
    let engine = Engine { op, models, smooth: &c, cap: Some(Cap { kappa, alpha: &alpha }) };
    let out = engine.run(params, init)?;
    single_result(out, model, &c, op, Some(kappa))
}

const FP_CHECK_MAX_ITERS: usize = 200;
const FP_CHECK_TOL: f64 = 1e-13;

/// Solves `A m̂ − B(m̂ ∇_ξH(∇_h u)) = 0`, `⟨ω, m̂⟩ = 1` by damped Picard
/// iteration on the linear Fokker–Planck solve.
pub fn forward_fp_check(
    model: &HamiltonianModel,
    op: &ConstraintOperator,
    u: &DiscreteField,
) -> Result<DiscreteField> {
    let g = op.grid();
    let du = op.nodal_gradient(u);
    let drift: Vec<Vec2> = (0..op.node_count()).map(|k| model.at(g.node(k)).grad(du[k])).collect();
    let n = op.node_count();
    let mut m = DiscreteField::constant(n, 1.0 / g.area());
    let mut change = f64::INFINITY;
    for _ in 0..FP_CHECK_MAX_ITERS {
        let w: DiscreteVectorField = (0..n).map(|k| [-m[k] * drift[k][0], -m[k] * drift[k][1]]).collect::<Vec<_>>().into();
        let next = op.solve_fp_linear(&w)?;
        change = 0.0;
        for k in 0..n {
            let v = 0.5 * m[k] + 0.5 * next[k];
            change = f64::max(change, (v - m[k]).abs());
            m[k] = v;
        }
        if change <= FP_CHECK_TOL {
            return Ok(m);
        }
    }
    Err(MfgError::FixedPointStalled { iterations: FP_CHECK_MAX_ITERS, change })
}
