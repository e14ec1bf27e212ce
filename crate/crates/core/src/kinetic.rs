//! The perspective integrand `b_q(x, m, w) = m H*(x, −w/m)`, its dual set
//! `A(x) = {(α, β) : α + H(x, −β) ≤ 0}` and the proximal operator of `b_q`.
//!
//! The conjugate of `b_q(x, ·, ·)` is the indicator of `A(x)`, so the prox is
//! computed through the Moreau identity
//! `prox_{σ b}(z) = z − σ Π_A(z/σ)`.

use serde::{Deserialize, Serialize};

use crate::discretization::{ConstraintOperator, DiscreteField, DiscreteVectorField};
use crate::error::{MfgError, Result};
use crate::hamiltonian::{dot, norm2, HamiltonianModel, PointHamiltonian, Vec2};

/// Densities with `|m|` at or below this are treated as exactly zero.
pub const ZERO_DENSITY: f64 = 1e-300;

const PROJECTION_MAX_ITERS: usize = 200;
const PROJECTION_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KineticSample {
    pub m: f64,
    pub w: Vec2,
}

impl KineticSample {
    pub const ZERO: Self = Self { m: 0.0, w: [0.0, 0.0] };

    pub fn new(m: f64, w: Vec2) -> Self {
        Self { m, w }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualSample {
    pub alpha: f64,
    pub beta: Vec2,
}

impl DualSample {
    pub fn in_set(&self, h: &PointHamiltonian) -> bool {
        self.alpha + h.value([-self.beta[0], -self.beta[1]]) <= 0.0
    }
}

/// Subdifferential of `b_q` at a point of its domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Subgradient {
    /// `m > 0`: `b_q` is differentiable.
    Unique(DualSample),
    /// `(m, w) = (0, 0)`: every element of `A(x)` is a subgradient.
    WholeSet,
}

pub fn bq_value(h: &PointHamiltonian, m: f64, w: Vec2) -> f64 {
    if m > ZERO_DENSITY {
        // m·H*(−w/m) without forming w/m.
        h.b.powf(1.0 - h.q) * norm2(w).powf(h.q) / (h.q * m.powf(h.q - 1.0)) - h.c * m
    } else if m.abs() <= ZERO_DENSITY && w == [0.0, 0.0] {
        0.0
    } else {
        f64::INFINITY
    }
}

pub fn bq_subgradient(h: &PointHamiltonian, m: f64, w: Vec2) -> Result<Subgradient> {
    if m > ZERO_DENSITY {
        let g = h.grad_conjugate([-w[0] / m, -w[1] / m]);
        let beta = [-g[0], -g[1]];
        let alpha = -h.value([-beta[0], -beta[1]]);
        Ok(Subgradient::Unique(DualSample { alpha, beta }))
    } else if m.abs() <= ZERO_DENSITY && w == [0.0, 0.0] {
        Ok(Subgradient::WholeSet)
    } else {
        Err(MfgError::OutsideDomain { m, w_norm: norm2(w) })
    }
}

/// Euclidean projection of `(α₀, β₀)` onto `A(x)`.
///
/// The projection keeps the direction of `β₀` and lies on the boundary
/// `α = −φ(t)`, `φ(t) = (b/q′)t^{q′} + c`, with `t = |β|` the root in
/// `[t₀, |β₀|]` of `t − |β₀| + (α₀ + φ(t))·b·t^{q′−1}`, where `t₀` is the point
/// at which `α₀ + φ(t₀) = 0` (or 0). The function is strictly increasing on
/// that bracket.
pub fn project_onto_a(h: &PointHamiltonian, alpha0: f64, beta0: Vec2) -> Result<DualSample> {
    let r = norm2(beta0);
    if alpha0 + h.profile(r) <= 0.0 {
        return Ok(DualSample { alpha: alpha0, beta: beta0 });
    }
    if r == 0.0 {
        return Ok(DualSample { alpha: -h.c, beta: [0.0, 0.0] });
    }
    let (b, qp) = (h.b, h.qprime);
    let residual = |t: f64| t - r + (alpha0 + h.profile(t)) * b * t.powf(qp - 1.0);
    let slope = |t: f64| {
        let gap = alpha0 + h.profile(t);
        1.0 + b * b * t.powf(2.0 * (qp - 1.0)) + gap * b * (qp - 1.0) * t.powf(qp - 2.0)
    };

    let mut lo = if alpha0 + h.c >= 0.0 {
        0.0
    } else {
        ((-alpha0 - h.c) * qp / b).powf(1.0 / qp).min(r)
    };
    let mut hi = r;
    let mut t = hi;
    let mut f = residual(t);
    let scale = 1.0 + r;
    let mut converged = f.abs() <= PROJECTION_TOL * scale;
    let mut iters = 0;
    while !converged && iters < PROJECTION_MAX_ITERS {
        iters += 1;
        if f > 0.0 {
            hi = t;
        } else {
            lo = t;
        }
        let d = if t > 0.0 { slope(t) } else { f64::NAN };
        let newton = t - f / d;
        t = if d.is_finite() && d > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        f = residual(t);
        converged = f.abs() <= PROJECTION_TOL * scale || (hi - lo) <= 4.0 * f64::EPSILON * hi;
    }
    if !converged {
        return Err(MfgError::ProjectionIterationLimit { iterations: iters, residual: f.abs() });
    }
    let s = t / r;
    Ok(DualSample { alpha: -h.profile(t), beta: [s * beta0[0], s * beta0[1]] })
}

/// `argmin_{m,w} b_q(m, w) + ((m − m̃)² + |w − w̃|²)/(2σ)`.
pub fn prox_bq(h: &PointHamiltonian, sigma: f64, m_tilde: f64, w_tilde: Vec2) -> Result<KineticSample> {
    debug_assert!(sigma > 0.0);
    let a0 = m_tilde / sigma;
    let b0 = [w_tilde[0] / sigma, w_tilde[1] / sigma];
    let p = project_onto_a(h, a0, b0)?;
    if p.alpha == a0 && p.beta == b0 {
        return Ok(KineticSample::ZERO);
    }
    let m = m_tilde - sigma * p.alpha;
    if m <= ZERO_DENSITY {
        return Ok(KineticSample::ZERO);
    }
    Ok(KineticSample { m, w: [w_tilde[0] - sigma * p.beta[0], w_tilde[1] - sigma * p.beta[1]] })
}

/// Prox of `Σᵢ b_q(hᵢ; mᵢ, wᵢ)` restricted to `Σᵢ aᵢ mᵢ ≤ cap`, for a stack of
/// samples sharing one node. Returns the minimizers and the multiplier
/// `p ≥ 0` of the cap: each block equals `prox_bq(hᵢ, σ, m̃ᵢ − σ p aᵢ, w̃ᵢ)`.
pub fn prox_bq_capped(
    hs: &[PointHamiltonian],
    sigma: f64,
    inputs: &[KineticSample],
    weights: &[f64],
    cap: f64,
    out: &mut [KineticSample],
) -> Result<f64> {
    debug_assert_eq!(hs.len(), inputs.len());
    let eval = |p: f64, out: &mut [KineticSample]| -> Result<f64> {
        let mut load = 0.0;
        for (k, (h, z)) in hs.iter().zip(inputs).enumerate() {
            let s = prox_bq(h, sigma, z.m - sigma * p * weights[k], z.w)?;
            load += weights[k] * s.m;
            out[k] = s;
        }
        Ok(load - cap)
    };
    let g0 = eval(0.0, out)?;
    if g0 <= 0.0 {
        return Ok(0.0);
    }
    if hs.len() == 1 && weights[0] > 0.0 {
        return Ok(capped_single(&hs[0], sigma, inputs[0], weights[0], cap, &mut out[0]));
    }
    let wsq: f64 = weights.iter().map(|a| a * a).sum();
    if wsq == 0.0 {
        return Err(MfgError::InvalidInput("all cap weights are zero".into()));
    }
    // Each mᵢ(p) is non-increasing, so the load is too; bracket by doubling.
    let (mut p_lo, mut g_lo) = (0.0, g0);
    let mut p_hi = g0 / (sigma * wsq);
    let mut g_hi = eval(p_hi, out)?;
    let mut doublings = 0;
    while g_hi > 0.0 {
        p_lo = p_hi;
        g_lo = g_hi;
        p_hi *= 2.0;
        g_hi = eval(p_hi, out)?;
        doublings += 1;
        if doublings > 200 {
            return Err(MfgError::ProjectionIterationLimit { iterations: doublings, residual: g_hi });
        }
    }
    // Illinois regula falsi with bisection fallback.
    let tol = 1e-14 * cap.abs().max(1.0);
    let mut side = 0i8;
    for _ in 0..200 {
        if g_hi > -tol || (p_hi - p_lo) <= 2.0 * f64::EPSILON * p_hi {
            break;
        }
        let mut p = (p_lo * g_hi - p_hi * g_lo) / (g_hi - g_lo);
        if !(p > p_lo && p < p_hi) {
            p = 0.5 * (p_lo + p_hi);
        }
        let g = eval(p, out)?;
        if g > 0.0 {
            p_lo = p;
            g_lo = g;
            if side == -1 {
                g_hi *= 0.5;
            }
            side = -1;
        } else {
            p_hi = p;
            g_hi = g;
            if side == 1 {
                g_lo *= 0.5;
            }
            side = 1;
        }
    }
    // Finish on the feasible side of the bracket.
    eval(p_hi, out)?;
    Ok(p_hi)
}

/// One block with an active cap: `m = cap/a` exactly, `w` is the prox of
/// `b_q(m, ·)` along `w̃`, and `p` follows from stationarity in `m`.
fn capped_single(
    h: &PointHamiltonian,
    sigma: f64,
    z: KineticSample,
    a: f64,
    cap: f64,
    out: &mut KineticSample,
) -> f64 {
    let m = cap / a;
    let r = norm2(z.w);
    let s = sigma * h.b.powf(1.0 - h.q) / m.powf(h.q - 1.0);
    // t − r + s t^{q−1} = 0 is increasing and convex on [0, r]; Newton from r
    // decreases monotonically to the root.
    let mut t = r;
    if r > 0.0 {
        for _ in 0..PROJECTION_MAX_ITERS {
            let f = t - r + s * t.powf(h.q - 1.0);
            let d = 1.0 + s * (h.q - 1.0) * t.powf(h.q - 2.0);
            let next = (t - f / d).max(0.0);
            if (t - next).abs() <= PROJECTION_TOL * (1.0 + r) {
                t = next;
                break;
            }
            t = next;
        }
    }
    let w = if r > 0.0 { [z.w[0] * t / r, z.w[1] * t / r] } else { [0.0, 0.0] };
    *out = KineticSample { m, w };
    let dm = -(h.q - 1.0) / h.q * h.b.powf(1.0 - h.q) * t.powf(h.q) / m.powf(h.q) - h.c;
    (((z.m - m) / sigma - dm) / a).max(0.0)
}

/// Lumped-quadrature integral `Σᵢ ωᵢ b_q(xᵢ, mᵢ, wᵢ)`.
pub fn bq_total(
    model: &HamiltonianModel,
    op: &ConstraintOperator,
    m: &DiscreteField,
    w: &DiscreteVectorField,
) -> f64 {
    let grid = op.grid();
    let mut total = 0.0;
    for k in 0..grid.node_count() {
        let v = bq_value(&model.at(grid.node(k)), m[k], w[k]);
        if v == f64::INFINITY {
            return f64::INFINITY;
        }
        total += op.weights()[k] * v;
    }
    total
}

/// `αm + β·w`, the pairing used in the Fenchel–Young checks.
#[inline]
pub fn pairing(d: &DualSample, z: &KineticSample) -> f64 {
    d.alpha * z.m + dot(d.beta, z.w)
}
