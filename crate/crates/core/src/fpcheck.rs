//! Seeded property battery over the Hamiltonian, kinetic, coupling and
//! discretization layers.
//!
//! Every case draws inputs with its own random stream, maps each input to a
//! scalar through a pure evaluation function, and compares the worst value
//! with a bound. The worst input is kept as a witness; [`replay`] feeds it
//! back through the same evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupling::{
    check_admissibility, pow_law, pow_primitive, Coupling, CouplingSpec,
};
use crate::discretization::{ConstraintOperator, DiscreteField, DiscreteVectorField, GridSpec};
use crate::hamiltonian::{dot, norm2, validate_growth, CosineField, HamiltonianModel, PointHamiltonian, Vec2};
use crate::kinetic::{bq_subgradient, bq_value, project_onto_a, prox_bq, prox_bq_capped, KineticSample, Subgradient};

/// Direction of the comparison with the tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    /// Pass when every value is at most the tolerance.
    AtMost,
    /// Pass when every value is at least the tolerance.
    AtLeast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyCase {
    pub name: String,
    pub samples: usize,
    pub tolerance: f64,
    pub bound: Bound,
    /// Largest value for `AtMost`, smallest for `AtLeast`.
    pub worst: f64,
    pub pass: bool,
    /// Input that produced `worst`.
    pub witness: Vec<f64>,
}

type Sampler = fn(&mut ChaCha8Rng, usize) -> Vec<f64>;
type Evaluator = fn(&[f64]) -> f64;

struct Case {
    name: &'static str,
    samples: usize,
    bound: Bound,
    tolerance: f64,
    sample: Sampler,
    eval: Evaluator,
}

fn cases() -> Vec<Case> {
    use Bound::{AtLeast, AtMost};
    let c = |name, samples, bound, tolerance, sample: Sampler, eval: Evaluator| Case {
        name,
        samples,
        bound,
        tolerance,
        sample,
        eval,
    };
    vec![
        c("coupling.admissibility_examples", 3, AtMost, 1e-12, index_sample, admissibility_examples),
        c("coupling.convexity_midpoint", 40, AtMost, 1e-12, convex_kind_sample, coupling_midpoint),
        c("coupling.derivative_order", 20, AtLeast, 1.9, kind_sample, coupling_derivative_order),
        c("coupling.primitive_derivative", 1000, AtMost, 1e-7, primitive_sample, primitive_derivative),
        c("discretization.adjointness", 50, AtMost, 1e-12, grid_sample, adjointness),
        c("discretization.affine_gradient", 50, AtMost, 1e-12, grid_sample, affine_gradient),
        c("discretization.constant_kernel", 50, AtMost, 1e-12, grid_sample, constant_kernel),
        c("discretization.fp_estimate_growth", 1, AtMost, 2.0, index_sample, fp_estimate_growth),
        c("discretization.fp_solve", 20, AtMost, 1e-10, grid_sample, fp_solve),
        c("discretization.manufactured_order", 1, AtLeast, 1.9, index_sample, manufactured_order),
        c("discretization.norm_examples", 3, AtMost, 1e-14, index_sample, norm_examples),
        c("discretization.stiffness_psd", 50, AtLeast, -1e-12, grid_sample, stiffness_rayleigh),
        c("discretization.stiffness_symmetry", 20, AtMost, 1e-14, grid_sample, stiffness_symmetry),
        c("hamiltonian.conjugacy_anchored", 3, AtMost, 1e-3, index_sample, conjugacy_anchored),
        c("hamiltonian.conjugacy_grid_sup", 1000, AtMost, 1e-3, conjugacy_sample, conjugacy_grid_sup),
        c("hamiltonian.gradient_fd", 1000, AtMost, 1e-6, pair_sample, gradient_fd),
        c("hamiltonian.growth_bounds", 50, AtMost, 0.0, model_sample, growth_bounds),
        c("hamiltonian.legendre_inversion", 1000, AtMost, 1e-9, pair_sample, legendre_inversion),
        c("hamiltonian.young_equality", 1000, AtMost, 1e-9, pair_sample, young_equality),
        c("hamiltonian.young_inequality", 1000, AtMost, 1e-9, pair_sample, young_inequality),
        c("kinetic.capped_prox_brute_force", 100, AtMost, 1e-4, capped_prox_sample, capped_prox_brute_force),
        c("kinetic.convexity", 1000, AtMost, 1e-12, two_point_sample, kinetic_convexity),
        c("kinetic.fenchel_young", 1000, AtMost, 1e-12, dual_point_sample, fenchel_young),
        c("kinetic.fenchel_young_equality", 1000, AtMost, 1e-12, two_point_sample, fenchel_young_equality),
        c("kinetic.homogeneity", 1000, AtMost, 1e-12, two_point_sample, homogeneity),
        c("kinetic.moreau_identity", 1000, AtMost, 1e-12, prox_sample, moreau_identity),
        c("kinetic.projection_boundary", 1000, AtMost, 1e-10, prox_sample, projection_boundary),
        c("kinetic.projection_normal", 1000, AtMost, 1e-8, prox_sample, projection_normal),
        c("kinetic.prox_brute_force", 100, AtMost, 1e-4, prox_sample, prox_brute_force),
        c("kinetic.subgradient_inequality", 1000, AtMost, 1e-12, two_point_sample, subgradient_inequality),
    ]
}

fn run_case(case: &Case, index: usize, seed: u64) -> PropertyCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let mut worst = match case.bound {
        Bound::AtMost => f64::NEG_INFINITY,
        Bound::AtLeast => f64::INFINITY,
    };
    let mut witness = Vec::new();
    let mut all_ok = true;
    for s in 0..case.samples {
        let input = (case.sample)(&mut rng, s);
        let v = (case.eval)(&input);
        let (ok, worse) = match case.bound {
            Bound::AtMost => (v <= case.tolerance, !(v <= worst)),
            Bound::AtLeast => (v >= case.tolerance, !(v >= worst)),
        };
        if worse && (all_ok || !ok) {
            worst = v;
            witness = input;
        }
        all_ok &= ok;
    }
    PropertyCase {
        name: case.name.to_owned(),
        samples: case.samples,
        tolerance: case.tolerance,
        bound: case.bound,
        worst,
        pass: all_ok,
        witness,
    }
}

/// Runs every case with the given seed; the report is ordered by name.
pub fn run_all(seed: u64) -> Vec<PropertyCase> {
    let list = cases();
    let mut out: Vec<PropertyCase> = list.par_iter().enumerate().map(|(i, c)| run_case(c, i, seed)).collect();
    out.sort_by(|a, b| a.name.cmp(&b.name));
    out
}

/// Names of all cases, in report order.
pub fn case_names() -> Vec<&'static str> {
    let mut names: Vec<_> = cases().iter().map(|c| c.name).collect();
    names.sort_unstable();
    names
}

/// Re-evaluates a case at a witness input.
pub fn replay(name: &str, witness: &[f64]) -> Option<f64> {
    cases().into_iter().find(|c| c.name == name).map(|c| (c.eval)(witness))
}

// ---------------------------------------------------------------- samplers

fn index_sample(_: &mut ChaCha8Rng, s: usize) -> Vec<f64> {
    vec![s as f64]
}

/// `[b, c, q′]`.
fn point_params(rng: &mut ChaCha8Rng) -> Vec<f64> {
    vec![rng.random_range(0.5..2.0), rng.random_range(-1.0..1.0), rng.random_range(1.2..1.9)]
}

fn point(v: &[f64]) -> PointHamiltonian {
    PointHamiltonian::new(v[0], v[1], v[2])
}

fn vec2(rng: &mut ChaCha8Rng, r: f64) -> [f64; 2] {
    [rng.random_range(-r..r), rng.random_range(-r..r)]
}

/// `[b, c, q′, η₁, η₂]`.
fn conjugacy_sample(rng: &mut ChaCha8Rng, _: usize) -> Vec<f64> {
    let mut v = point_params(rng);
    v.extend(vec2(rng, 2.0));
    v
}

/// `[b, c, q′, ξ₁, ξ₂, η₁, η₂]` with `|ξ| ≥ 0.2`.
fn pair_sample(rng: &mut ChaCha8Rng, _: usize) -> Vec<f64> {
    let mut v = point_params(rng);
    let r = rng.random_range(0.2..3.0);
    let th = rng.random_range(0.0..std::f64::consts::TAU);
    v.extend([r * th.cos(), r * th.sin()]);
    v.extend(vec2(rng, 3.0));
    v
}

/// Cosine coefficients of `b` and `c`, and `q′`.
fn model_sample(rng: &mut ChaCha8Rng, _: usize) -> Vec<f64> {
    let b1: f64 = rng.random_range(-0.5..0.5);
    let b2: f64 = rng.random_range(-0.5..0.5);
    let b0 = b1.abs() + b2.abs() + rng.random_range(0.2..2.0);
    vec![
        b0,
        b1,
        b2,
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(1.2..1.9),
    ]
}

/// `[b, c, q′, m₁, w₁, m₂, w₂, t]` with both points feasible and `m > 0`.
fn two_point_sample(rng: &mut ChaCha8Rng, _: usize) -> Vec<f64> {
    let mut v = point_params(rng);
    for _ in 0..2 {
        v.push(rng.random_range(0.01..3.0));
        v.extend(vec2(rng, 2.0));
    }
    v.push(rng.random_range(0.01..0.99));
    v
}

/// `[b, c, q′, α₀, β₀, m, w]`.
fn dual_point_sample(rng: &mut ChaCha8Rng, _: usize) -> Vec<f64> {
    let mut v = point_params(rng);
    v.push(rng.random_range(-3.0..3.0));
    v.extend(vec2(rng, 3.0));
    v.push(rng.random_range(0.01..3.0));
    v.extend(vec2(rng, 2.0));
    v
}

/// `[b, c, q′, σ, m̃, w̃]`.
fn prox_sample(rng: &mut ChaCha8Rng, _: usize) -> Vec<f64> {
    let mut v = point_params(rng);
    v.push(rng.random_range(0.2..2.0));
    v.push(rng.random_range(-1.0..2.0));
    v.extend(vec2(rng, 2.0));
    v
}

/// `[b, c, q′, σ, m̃, w̃, κ]`.
fn capped_prox_sample(rng: &mut ChaCha8Rng, s: usize) -> Vec<f64> {
    let mut v = prox_sample(rng, s);
    v.push(rng.random_range(0.1..1.5));
    v
}

/// `[r, sign, z]` with `|z| ≥ 0.1`.
fn primitive_sample(rng: &mut ChaCha8Rng, _: usize) -> Vec<f64> {
    let z = rng.random_range(0.1..3.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
    vec![rng.random_range(0.5..3.0), if rng.random::<bool>() { 1.0 } else { -1.0 }, z]
}

const COUPLING_KINDS: usize = 6;

/// `[kind, seed]`.
fn kind_sample(rng: &mut ChaCha8Rng, s: usize) -> Vec<f64> {
    vec![(s % COUPLING_KINDS) as f64, rng.random_range(0..1u64 << 52) as f64]
}

/// `[kind, seed]` over the convex kinds.
fn convex_kind_sample(rng: &mut ChaCha8Rng, s: usize) -> Vec<f64> {
    const CONVEX: [usize; 5] = [0, 1, 3, 4, 5];
    vec![CONVEX[s % CONVEX.len()] as f64, rng.random_range(0..1u64 << 52) as f64]
}

/// `[seed, nx, ny, lx, ly]`.
fn grid_sample(rng: &mut ChaCha8Rng, _: usize) -> Vec<f64> {
    vec![
        rng.random_range(0..1u64 << 52) as f64,
        rng.random_range(2..12usize) as f64,
        rng.random_range(2..12usize) as f64,
        rng.random_range(0.5..2.0),
        rng.random_range(0.5..2.0),
    ]
}

// ------------------------------------------------------------- oracles

/// Maximum of a concave function over a square: a coarse grid followed by
/// repeated zooming onto the best cell.
fn grid_sup(f: impl Fn(Vec2) -> f64, radius: f64) -> f64 {
    let coarse = 201;
    let mut best = ([0.0, 0.0], f64::NEG_INFINITY);
    for i in 0..coarse {
        for j in 0..coarse {
            let x = [
                -radius + 2.0 * radius * i as f64 / (coarse - 1) as f64,
                -radius + 2.0 * radius * j as f64 / (coarse - 1) as f64,
            ];
            let v = f(x);
            if v > best.1 {
                best = (x, v);
            }
        }
    }
    let mut half = 2.0 * radius / (coarse - 1) as f64;
    let fine = 21;
    for _ in 0..12 {
        let c = best.0;
        for i in 0..fine {
            for j in 0..fine {
                let x = [
                    c[0] - half + 2.0 * half * i as f64 / (fine - 1) as f64,
                    c[1] - half + 2.0 * half * j as f64 / (fine - 1) as f64,
                ];
                let v = f(x);
                if v > best.1 {
                    best = (x, v);
                }
            }
        }
        half *= 0.2;
    }
    best.1
}

/// Minimizer of a smooth convex function of `w` over a square: a coarse
/// grid, then compass search over the 8 neighbours, halving the step only
/// when none improves.
fn grid_argmin2(f: impl Fn(Vec2) -> f64, center: Vec2, radius: f64) -> (Vec2, f64) {
    let coarse = 41;
    let mut step = 2.0 * radius / (coarse - 1) as f64;
    let lo = [center[0] - radius, center[1] - radius];
    let mut best = (lo, f(lo));
    for i in 0..coarse {
        for j in 0..coarse {
            let x = [lo[0] + step * i as f64, lo[1] + step * j as f64];
            let v = f(x);
            if v < best.1 {
                best = (x, v);
            }
        }
    }
    while step > 1e-12 * (1.0 + radius) {
        let c = best.0;
        let mut moved = false;
        for dir in 0..9 {
            let x = [c[0] + ((dir % 3) as f64 - 1.0) * step, c[1] + ((dir / 3) as f64 - 1.0) * step];
            let v = f(x);
            if v < best.1 {
                best = (x, v);
                moved = true;
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    best
}

// ------------------------------------------------------- hamiltonian cases

fn conjugacy_grid_sup(v: &[f64]) -> f64 {
    let h = point(v);
    let eta = [v[3], v[4]];
    // |∇H*(η)| = (|η|/b)^{q−1} bounds the maximizer.
    let radius = 2.0 * (norm2(eta) / h.b).powf(h.q - 1.0) + 1.0;
    let sup = grid_sup(|xi| dot(eta, xi) - h.value(xi), radius);
    (h.conjugate(eta) - sup).abs()
}

fn conjugacy_anchored(v: &[f64]) -> f64 {
    // (b, c, q′, η, H*(η))
    const ANCHORS: [[f64; 6]; 3] = [
        [1.0, 0.0, 1.5, 0.0, 0.0, 0.0],
        [1.0, 0.0, 1.5, 1.0, 0.0, 1.0 / 3.0],
        [2.0, 0.0, 1.5, 1.0, 0.0, 1.0 / 12.0],
    ];
    let a = ANCHORS[v[0] as usize];
    let closed = conjugacy_grid_sup(&a[..5]);
    let h = point(&a);
    closed.max((h.conjugate([a[3], a[4]]) - a[5]).abs())
}

fn legendre_inversion(v: &[f64]) -> f64 {
    let h = point(v);
    let eta = [v[5], v[6]];
    let back = h.grad(h.grad_conjugate(eta));
    norm2([back[0] - eta[0], back[1] - eta[1]]) / (1.0 + norm2(eta))
}

fn young_inequality(v: &[f64]) -> f64 {
    let h = point(v);
    let (xi, eta) = ([v[3], v[4]], [v[5], v[6]]);
    (dot(xi, eta) - h.value(xi) - h.conjugate(eta)).max(0.0) / (1.0 + norm2(xi) * norm2(eta))
}

fn young_equality(v: &[f64]) -> f64 {
    let h = point(v);
    let xi = [v[3], v[4]];
    let eta = h.grad(xi);
    (h.value(xi) + h.conjugate(eta) - dot(xi, eta)).abs() / (1.0 + norm2(xi) * norm2(eta))
}

fn gradient_fd(v: &[f64]) -> f64 {
    let h = point(v);
    let xi = [v[3], v[4]];
    let eta = [v[5], v[6]];
    let step = 1e-5;
    let fd = |f: &dyn Fn(Vec2) -> f64, x: Vec2| -> Vec2 {
        [
            (f([x[0] + step, x[1]]) - f([x[0] - step, x[1]])) / (2.0 * step),
            (f([x[0], x[1] + step]) - f([x[0], x[1] - step])) / (2.0 * step),
        ]
    };
    let gh = h.grad(xi);
    let dh = fd(&|x| h.value(x), xi);
    let e1 = norm2([gh[0] - dh[0], gh[1] - dh[1]]) / (1.0 + norm2(gh));
    // The conjugate is smooth away from the origin only; shift η off it.
    let eta = if norm2(eta) < 0.2 { [eta[0] + 0.5, eta[1]] } else { eta };
    let gs = h.grad_conjugate(eta);
    let ds = fd(&|x| h.conjugate(x), eta);
    let e2 = norm2([gs[0] - ds[0], gs[1] - ds[1]]) / (1.0 + norm2(gs));
    e1.max(e2)
}

fn growth_bounds(v: &[f64]) -> f64 {
    let model = HamiltonianModel::new(v[6], CosineField::new(v[0], v[1], v[2]), CosineField::new(v[3], v[4], v[5]), [1.0, 1.0]);
    match model.and_then(|m| validate_growth(&m, 200)) {
        Ok(r) if r.pass => 0.0,
        Ok(r) => -r.worst_slack,
        Err(_) => f64::INFINITY,
    }
}

// ----------------------------------------------------------- kinetic cases

fn two_points(v: &[f64]) -> (PointHamiltonian, KineticSample, KineticSample, f64) {
    (point(v), KineticSample::new(v[3], [v[4], v[5]]), KineticSample::new(v[6], [v[7], v[8]]), v[9])
}

fn kinetic_convexity(v: &[f64]) -> f64 {
    let (h, a, b, t) = two_points(v);
    let mid = KineticSample::new(t * a.m + (1.0 - t) * b.m, [t * a.w[0] + (1.0 - t) * b.w[0], t * a.w[1] + (1.0 - t) * b.w[1]]);
    let (fa, fb) = (bq_value(&h, a.m, a.w), bq_value(&h, b.m, b.w));
    (bq_value(&h, mid.m, mid.w) - t * fa - (1.0 - t) * fb) / (1.0 + fa.abs() + fb.abs())
}

fn homogeneity(v: &[f64]) -> f64 {
    let (h, a, _, t) = two_points(v);
    let s = 4.0 * t + 0.05;
    let scaled = bq_value(&h, s * a.m, [s * a.w[0], s * a.w[1]]);
    let base = s * bq_value(&h, a.m, a.w);
    (scaled - base).abs() / (1.0 + base.abs())
}

fn fenchel_young(v: &[f64]) -> f64 {
    let h = point(v);
    let Ok(d) = project_onto_a(&h, v[3], [v[4], v[5]]) else { return f64::INFINITY };
    let (m, w) = (v[6], [v[7], v[8]]);
    let b = bq_value(&h, m, w);
    let pair = d.alpha * m + dot(d.beta, w);
    (pair - b).max(0.0) / (1.0 + b.abs() + pair.abs())
}

fn subgradient_at(h: &PointHamiltonian, z: &KineticSample) -> Option<(f64, Vec2)> {
    match bq_subgradient(h, z.m, z.w) {
        Ok(Subgradient::Unique(d)) => Some((d.alpha, d.beta)),
        _ => None,
    }
}

fn fenchel_young_equality(v: &[f64]) -> f64 {
    let (h, a, _, _) = two_points(v);
    let Some((alpha, beta)) = subgradient_at(&h, &a) else { return f64::INFINITY };
    let b = bq_value(&h, a.m, a.w);
    let pair = alpha * a.m + dot(beta, a.w);
    let in_set = alpha + h.value([-beta[0], -beta[1]]);
    ((pair - b).abs() + in_set.max(0.0)) / (1.0 + b.abs())
}

fn subgradient_inequality(v: &[f64]) -> f64 {
    let (h, a, b, _) = two_points(v);
    let Some((alpha, beta)) = subgradient_at(&h, &a) else { return f64::INFINITY };
    let fa = bq_value(&h, a.m, a.w);
    let fb = bq_value(&h, b.m, b.w);
    let lin = fa + alpha * (b.m - a.m) + dot(beta, [b.w[0] - a.w[0], b.w[1] - a.w[1]]);
    (lin - fb).max(0.0) / (1.0 + fa.abs() + fb.abs())
}

fn prox_input(v: &[f64]) -> (PointHamiltonian, f64, f64, Vec2) {
    (point(v), v[3], v[4], [v[5], v[6]])
}

fn moreau_identity(v: &[f64]) -> f64 {
    let (h, sigma, m, w) = prox_input(v);
    let (Ok(p), Ok(d)) = (prox_bq(&h, sigma, m, w), project_onto_a(&h, m / sigma, [w[0] / sigma, w[1] / sigma])) else {
        return f64::INFINITY;
    };
    let r = [p.m + sigma * d.alpha - m, p.w[0] + sigma * d.beta[0] - w[0], p.w[1] + sigma * d.beta[1] - w[1]];
    r.iter().fold(0.0f64, |a, x| a.max(x.abs())) / (1.0 + m.abs() + norm2(w))
}

/// Scaled so that most inputs lie outside the set.
fn exterior(v: &[f64]) -> (PointHamiltonian, f64, Vec2) {
    let (h, sigma, m, w) = prox_input(v);
    (h, m / sigma + 1.0, [w[0] / sigma, w[1] / sigma])
}

fn projection_boundary(v: &[f64]) -> f64 {
    let (h, a0, b0) = exterior(v);
    let Ok(d) = project_onto_a(&h, a0, b0) else { return f64::INFINITY };
    let g = d.alpha + h.value([-d.beta[0], -d.beta[1]]);
    if a0 + h.value([-b0[0], -b0[1]]) <= 0.0 {
        // Interior points are returned unchanged.
        return if d.alpha == a0 && d.beta == b0 { 0.0 } else { f64::INFINITY };
    }
    g.abs() / (1.0 + a0.abs())
}

fn projection_normal(v: &[f64]) -> f64 {
    let (h, a0, b0) = exterior(v);
    let Ok(d) = project_onto_a(&h, a0, b0) else { return f64::INFINITY };
    if a0 + h.value([-b0[0], -b0[1]]) <= 0.0 {
        return 0.0;
    }
    // Outward normal of {α + H(−β) ≤ 0} at (α, β) is (1, −∇H(−β)).
    let gh = h.grad([-d.beta[0], -d.beta[1]]);
    let n = [1.0, -gh[0], -gh[1]];
    let r = [a0 - d.alpha, b0[0] - d.beta[0], b0[1] - d.beta[1]];
    let nn: f64 = n.iter().map(|x| x * x).sum();
    let mu = (0..3).map(|i| r[i] * n[i]).sum::<f64>() / nn;
    let off: f64 = (0..3).map(|i| (r[i] - mu * n[i]).powi(2)).sum::<f64>().sqrt();
    let rn: f64 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    off / (1.0 + rn) + (-mu).max(0.0)
}

/// Brute-force prox over `m ∈ [0, m_max]`: golden-section search on
/// `φ(m) = min_w b_q(m, w) + ((m − m̃)² + |w − w̃|²)/(2σ)`, which is convex
/// in `m`, with the inner minimum found by direct search.
fn brute_force_gap(h: &PointHamiltonian, sigma: f64, m0: f64, w0: Vec2, m_max: f64, p: KineticSample) -> f64 {
    let radius = 3.0 + norm2(w0);
    let inner = |m: f64| -> (Vec2, f64) {
        if m <= 0.0 {
            let at_zero = (m0 * m0 + norm2(w0).powi(2)) / (2.0 * sigma);
            return ([0.0, 0.0], at_zero);
        }
        let f = |w: Vec2| {
            bq_value(h, m, w) + ((m - m0).powi(2) + (w[0] - w0[0]).powi(2) + (w[1] - w0[1]).powi(2)) / (2.0 * sigma)
        };
        grid_argmin2(f, w0, radius)
    };
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (0.0, m_max);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (inner(c).1, inner(d).1);
    while b - a > 1e-10 {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = inner(c).1;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = inner(d).1;
        }
    }
    // The boundary values are not visited by the interior probes.
    let candidates = [0.0, 0.5 * (a + b), m_max];
    let (m, (w, _)) = candidates
        .iter()
        .map(|&m| (m, inner(m)))
        .min_by(|x, y| x.1 .1.total_cmp(&y.1 .1))
        .expect("non-empty");
    let d = [p.m - m, p.w[0] - w[0], p.w[1] - w[1]];
    d.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

fn prox_brute_force(v: &[f64]) -> f64 {
    let (h, sigma, m, w) = prox_input(v);
    let Ok(p) = prox_bq(&h, sigma, m, w) else { return f64::INFINITY };
    brute_force_gap(&h, sigma, m, w, m.max(0.0) + 3.0, p)
}

fn capped_prox_brute_force(v: &[f64]) -> f64 {
    let (h, sigma, m, w) = prox_input(v);
    let kappa = v[7];
    let mut out = [KineticSample::ZERO];
    if prox_bq_capped(&[h], sigma, &[KineticSample::new(m, w)], &[1.0], kappa, &mut out).is_err() {
        return f64::INFINITY;
    }
    brute_force_gap(&h, sigma, m, w, kappa, out[0])
}

// ---------------------------------------------------------- coupling cases

fn primitive_derivative(v: &[f64]) -> f64 {
    let (r, s, z) = (v[0], v[1], v[2]);
    let h = 1e-5;
    let fd = (pow_primitive(r, s, z + h) - pow_primitive(r, s, z - h)) / (2.0 * h);
    let f = pow_law(r, s, z);
    (fd - f).abs() / (1.0 + f.abs())
}

fn coupling_kind(k: usize) -> CouplingSpec {
    match k {
        0 => CouplingSpec::Zero {},
        1 => CouplingSpec::power(3.0, 1.0),
        2 => CouplingSpec::power(2.0, -1.0),
        3 => CouplingSpec::GradientDependent { weight: 0.7, lipschitz_hint: None },
        4 => CouplingSpec::NonlocalConvolution { radius: 0.25, a: 1.0, b: 0.0, tilt: [0.6, -0.3], lipschitz_hint: None },
        _ => CouplingSpec::NonlocalConvolution { radius: 0.3, a: 0.5, b: 0.8, tilt: [0.2, 0.4], lipschitz_hint: None },
    }
}

fn coupling_setup(v: &[f64]) -> (ConstraintOperator, Coupling, ChaCha8Rng) {
    let op = ConstraintOperator::build(&GridSpec::new(1.0, 1.2, 10, 12).expect("valid grid"));
    let c = Coupling::new(&coupling_kind(v[0] as usize), &op).expect("valid coupling");
    (op, c, ChaCha8Rng::seed_from_u64(v[1] as u64))
}

fn coupling_derivative_order(v: &[f64]) -> f64 {
    let (op, c, mut rng) = coupling_setup(v);
    let n = op.node_count();
    let m: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..2.0)).collect();
    let z: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g = c.derivative(&op, &m);
    let exact = op.inner(&g, &z);
    let err = |h: f64| {
        let plus: Vec<f64> = m.iter().zip(&z).map(|(a, b)| a + h * b).collect();
        let minus: Vec<f64> = m.iter().zip(&z).map(|(a, b)| a - h * b).collect();
        ((c.value(&op, &plus) - c.value(&op, &minus)) / (2.0 * h) - exact).abs()
    };
    let (e1, e2) = (err(1e-3), err(1e-4));
    if e1 <= 1e-11 * (1.0 + exact.abs()) {
        // Quadratic functionals: the central difference is exact up to roundoff.
        return f64::INFINITY;
    }
    (e1 / e2).log10()
}

fn coupling_midpoint(v: &[f64]) -> f64 {
    let (op, c, mut rng) = coupling_setup(v);
    let n = op.node_count();
    let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
    let b: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
    let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
    let (fa, fb) = (c.value(&op, &a), c.value(&op, &b));
    (c.value(&op, &mid) - 0.5 * (fa + fb)) / (1.0 + fa.abs() + fb.abs())
}

fn admissibility_examples(v: &[f64]) -> f64 {
    let bad = f64::INFINITY;
    match v[0] as usize {
        0 => match check_admissibility(&CouplingSpec::power(1.0, 1.0), 5.0) {
            Ok(r) if r.monotone => r.min_primitive.abs().max((r.max_abs_f - 5.0).abs()),
            _ => bad,
        },
        1 => match check_admissibility(&CouplingSpec::power(2.0, -1.0), 2.0) {
            Ok(r) if !r.global_lower_bound_plausible => (r.min_primitive + 8.0 / 3.0).abs(),
            _ => bad,
        },
        _ => match check_admissibility(&CouplingSpec::Zero {}, 1.0) {
            Ok(r) if r.monotone && r.global_lower_bound_plausible => r.min_primitive.abs().max(r.max_abs_f),
            _ => bad,
        },
    }
}

// ---------------------------------------------------- discretization cases

fn grid_setup(v: &[f64]) -> (ConstraintOperator, ChaCha8Rng) {
    let grid = GridSpec::new(v[3], v[4], v[1] as usize, v[2] as usize).expect("valid grid");
    (ConstraintOperator::build(&grid), ChaCha8Rng::seed_from_u64(v[0] as u64))
}

fn random_field(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_vector_field(rng: &mut ChaCha8Rng, n: usize) -> DiscreteVectorField {
    (0..n).map(|_| vec2(rng, 1.0)).collect::<Vec<_>>().into()
}

fn adjointness(v: &[f64]) -> f64 {
    let (op, mut rng) = grid_setup(v);
    let n = op.node_count();
    let w = random_vector_field(&mut rng, n);
    let phi = random_field(&mut rng, n);
    let lhs: f64 = op.apply_b(&w).iter().zip(&phi).map(|(a, b)| a * b).sum();
    let grad = op.nodal_gradient(&phi);
    let rhs: f64 = -(0..n).map(|k| op.weights()[k] * dot(w[k], grad[k])).sum::<f64>();
    (lhs - rhs).abs() / (1.0 + lhs.abs())
}

fn affine_gradient(v: &[f64]) -> f64 {
    let (op, mut rng) = grid_setup(v);
    let (a, b, c) = (rng.random_range(-1.0..1.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    let u = DiscreteField::from_fn(op.grid(), |x| a + b * x[0] + c * x[1]);
    op.nodal_gradient(&u).iter().fold(0.0f64, |s, g| s.max((g[0] - b).abs()).max((g[1] - c).abs()))
}

fn constant_kernel(v: &[f64]) -> f64 {
    let (op, mut rng) = grid_setup(v);
    let n = op.node_count();
    let c = rng.random_range(-2.0..2.0);
    let ac = op.apply_a(&vec![c; n]).iter().fold(0.0f64, |s, x| s.max(x.abs()));
    let w0 = vec2(&mut rng, 1.0);
    let bw: f64 = op.apply_b(&vec![w0; n].into()).iter().sum();
    ac.max(bw.abs())
}

fn stiffness_symmetry(v: &[f64]) -> f64 {
    let (op, _) = grid_setup(v);
    let a = op.stiffness();
    let mut worst: f64 = 0.0;
    for (val, (i, j)) in a.iter() {
        let t = a.get(j, i).copied().unwrap_or(0.0);
        worst = worst.max((val - t).abs());
    }
    worst
}

fn stiffness_rayleigh(v: &[f64]) -> f64 {
    let (op, mut rng) = grid_setup(v);
    let x = random_field(&mut rng, op.node_count());
    let ax = op.apply_a(&x);
    let num: f64 = x.iter().zip(&ax).map(|(a, b)| a * b).sum();
    num / x.iter().map(|a| a * a).sum::<f64>()
}

fn fp_solve(v: &[f64]) -> f64 {
    let (op, mut rng) = grid_setup(v);
    let w = random_vector_field(&mut rng, op.node_count());
    match op.solve_fp_linear(&w) {
        Ok(m) => (op.integrate(&m) - 1.0).abs().max(op.fp_residual(&m, &w)),
        Err(_) => f64::INFINITY,
    }
}

/// Observed `L²` order of the linear Fokker–Planck solve for
/// `w = ∇cos(πx)`, whose solution is `m = 1 + cos(πx)`.
pub fn manufactured_errors(cells: &[usize]) -> Vec<f64> {
    use std::f64::consts::PI;
    cells
        .iter()
        .map(|&nx| {
            let grid = GridSpec::new(1.0, 1.0, nx, nx).expect("valid grid");
            let op = ConstraintOperator::build(&grid);
            let w = DiscreteVectorField::from_fn(&grid, |x| [-PI * (PI * x[0]).sin(), 0.0]);
            let m = op.solve_fp_linear(&w).expect("factorization succeeds");
            let e: Vec<f64> = (0..op.node_count()).map(|k| m[k] - 1.0 - (PI * grid.node(k)[0]).cos()).collect();
            op.lq_norm(&e, 2.0)
        })
        .collect()
}

fn manufactured_order(_: &[f64]) -> f64 {
    let e = manufactured_errors(&[16, 32, 64]);
    (e[0] / e[1]).log2().min((e[1] / e[2]).log2())
}

fn fp_estimate_growth(_: &[f64]) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3c6e_f372);
    let q = 3.0;
    let fitted = |nodes: usize, rng: &mut ChaCha8Rng| -> f64 {
        let op = ConstraintOperator::build(&GridSpec::unit_square(nodes).expect("valid grid"));
        let mut c: f64 = 0.0;
        for _ in 0..20 {
            let w = random_vector_field(rng, op.node_count());
            let Ok(m) = op.solve_fp_linear(&w) else { return f64::INFINITY };
            c = c.max(op.norms(&m, q).w1q / (op.lq_norm_vec(&w, q) + 1.0));
        }
        c
    };
    let coarse = fitted(17, &mut rng);
    fitted(33, &mut rng) / coarse
}

fn norm_examples(v: &[f64]) -> f64 {
    match v[0] as usize {
        0 => {
            let op = ConstraintOperator::build(&GridSpec::unit_square(9).expect("valid grid"));
            (op.lq_norm(&vec![1.0; op.node_count()], 3.0) - 1.0).abs()
        }
        1 => {
            let op = ConstraintOperator::build(&GridSpec::new(2.0, 2.0, 6, 6).expect("valid grid"));
            (op.lq_norm(&vec![2.0; op.node_count()], 3.0) - 2.0 * 4f64.powf(1.0 / 3.0)).abs()
        }
        _ => {
            let op = ConstraintOperator::build(&GridSpec::unit_square(5).expect("valid grid"));
            let n = op.norms(&vec![0.0; op.node_count()], 3.0);
            n.lq.max(n.linf).max(n.w1q)
        }
    }
}
