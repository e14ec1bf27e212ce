//! Power-law Hamiltonians `H(x, ξ) = (b(x)/q′)|ξ|^{q′} + c(x)` with their
//! closed-form Legendre transforms and gradient maps.
//!
//! With `q = q′/(q′ − 1)` the conjugate is `H*(x, η) = b(x)^{1−q}|η|^q/q − c(x)`,
//! and `∇H(x, ·)` and `∇H*(x, ·)` are mutually inverse maps.
//!
//! Other Hamiltonian families can be supported by providing a type with the
//! same four pointwise operations as [`PointHamiltonian`]; the dual projection
//! in [`crate::kinetic`] relies only on radial symmetry and monotonicity of
//! `t ↦ H(x, t e)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MfgError, Result};

pub type Vec2 = [f64; 2];

#[inline]
pub(crate) fn norm2(v: Vec2) -> f64 {
    v[0].hypot(v[1])
}

#[inline]
pub(crate) fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// `|v|^{p−2} v`, with value 0 at the origin (valid for p > 1).
#[inline]
fn signed_power(v: Vec2, p: f64) -> Vec2 {
    let r = norm2(v);
    if r == 0.0 {
        return [0.0, 0.0];
    }
    let s = r.powf(p - 2.0);
    [s * v[0], s * v[1]]
}

/// Coefficient field `a0 + a1·cos(πx) + a2·cos(πy)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CosineField {
    pub a0: f64,
    #[serde(default)]
    pub a1: f64,
    #[serde(default)]
    pub a2: f64,
}

impl CosineField {
    pub const fn constant(a0: f64) -> Self {
        Self { a0, a1: 0.0, a2: 0.0 }
    }

    pub const fn new(a0: f64, a1: f64, a2: f64) -> Self {
        Self { a0, a1, a2 }
    }

    #[inline]
    pub fn eval(&self, x: Vec2) -> f64 {
        self.a0
            + self.a1 * (std::f64::consts::PI * x[0]).cos()
            + self.a2 * (std::f64::consts::PI * x[1]).cos()
    }

    /// Exact range over the rectangle `[0, lx] × [0, ly]`.
    pub fn range(&self, lx: f64, ly: f64) -> (f64, f64) {
        let term = |a: f64, len: f64| {
            // cos(πs) over s ∈ [0, len] spans [cos(π·min(len, 1)), 1].
            let lo = (std::f64::consts::PI * len.min(1.0)).cos();
            let (u, v) = (a * lo, a);
            (u.min(v), u.max(v))
        };
        let (xl, xh) = term(self.a1, lx);
        let (yl, yh) = term(self.a2, ly);
        (self.a0 + xl + yl, self.a0 + xh + yh)
    }
}

impl From<f64> for CosineField {
    fn from(a0: f64) -> Self {
        Self::constant(a0)
    }
}

/// The Hamiltonian frozen at one point `x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointHamiltonian {
    pub b: f64,
    pub c: f64,
    pub qprime: f64,
    pub q: f64,
}

impl PointHamiltonian {
    pub fn new(b: f64, c: f64, qprime: f64) -> Self {
        Self { b, c, qprime, q: qprime / (qprime - 1.0) }
    }

    #[inline]
    pub fn value(&self, xi: Vec2) -> f64 {
        self.b / self.qprime * norm2(xi).powf(self.qprime) + self.c
    }

    #[inline]
    pub fn conjugate(&self, eta: Vec2) -> f64 {
        self.b.powf(1.0 - self.q) * norm2(eta).powf(self.q) / self.q - self.c
    }

    #[inline]
    pub fn grad(&self, xi: Vec2) -> Vec2 {
        let g = signed_power(xi, self.qprime);
        [self.b * g[0], self.b * g[1]]
    }

    #[inline]
    pub fn grad_conjugate(&self, eta: Vec2) -> Vec2 {
        let g = signed_power(eta, self.q);
        let s = self.b.powf(1.0 - self.q);
        [s * g[0], s * g[1]]
    }

    /// Radial profile `t ↦ (b/q′)t^{q′} + c`, so that `H(ξ) = profile(|ξ|)`.
    #[inline]
    pub fn profile(&self, t: f64) -> f64 {
        self.b / self.qprime * t.powf(self.qprime) + self.c
    }
}

/// Spatially varying power-law Hamiltonian on the rectangle `[0, lx] × [0, ly]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianModel {
    qprime: f64,
    b: CosineField,
    c: CosineField,
    lengths: [f64; 2],
    growth_c1: f64,
    growth_c2: f64,
}

impl HamiltonianModel {
    /// Builds the model and declares the smallest growth constants that the
    /// coefficient ranges guarantee: `C₁ = max(max b, 1/min b, 1)`, `C₂ = max|c|`.
    pub fn new(qprime: f64, b: CosineField, c: CosineField, lengths: [f64; 2]) -> Result<Self> {
        if !(qprime > 1.0 && qprime < 2.0) {
            return Err(MfgError::InvalidInput(format!(
                "exponent q' = {qprime} must lie in (1, 2) so that q = q'/(q'-1) exceeds the dimension d = 2"
            )));
        }
        if !(lengths[0] > 0.0 && lengths[1] > 0.0) {
            return Err(MfgError::InvalidInput("domain lengths must be positive".into()));
        }
        let (b_min, b_max) = b.range(lengths[0], lengths[1]);
        if !(b_min > 0.0) {
            return Err(MfgError::InvalidInput(format!(
                "coefficient b must be positive on the domain (min b = {b_min})"
            )));
        }
        let (c_min, c_max) = c.range(lengths[0], lengths[1]);
        Ok(Self {
            qprime,
            b,
            c,
            lengths,
            growth_c1: b_max.max(1.0 / b_min).max(1.0),
            growth_c2: c_min.abs().max(c_max.abs()),
        })
    }

    /// `H(ξ) = |ξ|^{q′}/q′` on the given rectangle.
    pub fn isotropic(qprime: f64, lengths: [f64; 2]) -> Result<Self> {
        Self::new(qprime, CosineField::constant(1.0), CosineField::constant(0.0), lengths)
    }

    /// Overrides the declared growth constants. They are not checked here;
    /// use [`validate_growth`].
    pub fn with_growth_constants(mut self, c1: f64, c2: f64) -> Result<Self> {
        if !(c1 >= 1.0 && c2 >= 0.0) {
            return Err(MfgError::InvalidInput(format!(
                "growth constants need C1 >= 1 and C2 >= 0 (got {c1}, {c2})"
            )));
        }
        self.growth_c1 = c1;
        self.growth_c2 = c2;
        Ok(self)
    }

    pub fn qprime(&self) -> f64 {
        self.qprime
    }

    pub fn q(&self) -> f64 {
        self.qprime / (self.qprime - 1.0)
    }

    pub fn growth_c1(&self) -> f64 {
        self.growth_c1
    }

    pub fn growth_c2(&self) -> f64 {
        self.growth_c2
    }

    pub fn coeff_b(&self) -> &CosineField {
        &self.b
    }

    pub fn coeff_c(&self) -> &CosineField {
        &self.c
    }

    pub fn lengths(&self) -> [f64; 2] {
        self.lengths
    }

    pub fn b_min(&self) -> f64 {
        self.b.range(self.lengths[0], self.lengths[1]).0
    }

    #[inline]
    pub fn at(&self, x: Vec2) -> PointHamiltonian {
        PointHamiltonian::new(self.b.eval(x), self.c.eval(x), self.qprime)
    }
}

pub fn h_value(model: &HamiltonianModel, x: Vec2, xi: Vec2) -> f64 {
    model.at(x).value(xi)
}

pub fn hstar_value(model: &HamiltonianModel, x: Vec2, eta: Vec2) -> f64 {
    model.at(x).conjugate(eta)
}

pub fn grad_h(model: &HamiltonianModel, x: Vec2, xi: Vec2) -> Vec2 {
    model.at(x).grad(xi)
}

pub fn grad_hstar(model: &HamiltonianModel, x: Vec2, eta: Vec2) -> Vec2 {
    model.at(x).grad_conjugate(eta)
}

/// Which of the four growth inequalities a sample violated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthBound {
    HLower,
    HUpper,
    HstarLower,
    HstarUpper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthWitness {
    pub x: Vec2,
    pub argument: Vec2,
    pub bound: GrowthBound,
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthReport {
    pub pass: bool,
    pub samples: usize,
    /// Smallest `(bound − value)` over all samples and inequalities, relative
    /// to `1 + |value|`; negative means a violation.
    pub worst_slack: f64,
    pub witness: Option<GrowthWitness>,
}

/// Samples points and arguments and checks the two-sided growth bounds on
/// `H` and the implied bounds on `H*` against the declared constants.
pub fn validate_growth(model: &HamiltonianModel, sample_count: usize) -> Result<GrowthReport> {
    if sample_count == 0 {
        return Err(MfgError::InvalidInput("sample_count must be at least 1".into()));
    }
    let (qp, q) = (model.qprime, model.q());
    let (c1, c2) = (model.growth_c1, model.growth_c2);
    let mut rng = ChaCha8Rng::seed_from_u64(0x6a09_e667);
    let mut worst = f64::INFINITY;
    let mut witness = None;
    let tol = 1e-12;

    let mut record = |x: Vec2, arg: Vec2, bound: GrowthBound, slack: f64| {
        worst = worst.min(slack);
        // Keep the first violation so that replaying it is straightforward.
        if slack < -tol && witness.is_none() {
            witness = Some(GrowthWitness { x, argument: arg, bound, slack });
        }
    };

    for k in 0..sample_count {
        let x = [rng.random::<f64>() * model.lengths[0], rng.random::<f64>() * model.lengths[1]];
        // The unit vector is always probed first: it is where additive offsets show up.
        let arg = if k == 0 {
            [1.0, 0.0]
        } else {
            let theta = rng.random::<f64>() * std::f64::consts::TAU;
            let r = 10f64.powf(rng.random_range(-3.0..3.0));
            [r * theta.cos(), r * theta.sin()]
        };
        let h = model.at(x);
        let r = norm2(arg);

        let hv = h.value(arg);
        let scale = 1.0 + hv.abs();
        record(x, arg, GrowthBound::HLower, (hv - (r.powf(qp) / (qp * c1) - c2)) / scale);
        record(x, arg, GrowthBound::HUpper, ((c1 / qp * r.powf(qp) + c2) - hv) / scale);

        let hs = h.conjugate(arg);
        let scale = 1.0 + hs.abs();
        record(x, arg, GrowthBound::HstarLower, (hs - (c1.powf(1.0 - q) / q * r.powf(q) - c2)) / scale);
        record(x, arg, GrowthBound::HstarUpper, ((c1.powf(q - 1.0) / q * r.powf(q) + c2) - hs) / scale);
    }
    Ok(GrowthReport { pass: worst >= -tol, samples: sample_count, worst_slack: worst, witness })
}
