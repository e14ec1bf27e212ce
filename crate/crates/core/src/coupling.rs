//! Coupling functionals `ℱ(m)` and their derivatives.
//!
//! Derivatives are returned as representers in the lumped inner product:
//! `g` with `⟨g, z⟩_ω = Dℱ(m)[z]` for every nodal `z`.

use serde::{Deserialize, Serialize};

use crate::discretization::{ConstraintOperator, DiscreteField};
use crate::error::{MfgError, Result};

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalLaw {
    /// `f(z) = sign·sgn(z)|z|^r`, `F(z) = sign·|z|^{r+1}/(r+1)`.
    #[default]
    Pow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CouplingSpec {
    Zero {},
    LocalPrimitive {
        #[serde(default)]
        f: LocalLaw,
        r: f64,
        #[serde(default = "one")]
        sign: f64,
        #[serde(default)]
        lipschitz_hint: Option<f64>,
    },
    /// `ℱ(m) = (weight/2)∫|∇m|²`.
    GradientDependent {
        #[serde(default = "one")]
        weight: f64,
        #[serde(default)]
        lipschitz_hint: Option<f64>,
    },
    /// `ℱ(m) = ∫_{Ω_ε} (a/2)(ρ∗m)² + (b/2)|ρ∗∇m|²` with a bump kernel of
    /// radius `ε`, optionally tilted to make it asymmetric.
    NonlocalConvolution {
        radius: f64,
        #[serde(default = "one")]
        a: f64,
        #[serde(default)]
        b: f64,
        #[serde(default)]
        tilt: [f64; 2],
        #[serde(default)]
        lipschitz_hint: Option<f64>,
    },
    /// `ℱ(m) = ∫ (s/2)m² + o·m`: the coupling seen by one population when
    /// the others are frozen under a linear interaction.
    #[serde(skip)]
    Frozen { self_coeff: f64, offset: Vec<f64> },
}

impl CouplingSpec {
    pub fn power(r: f64, sign: f64) -> Self {
        Self::LocalPrimitive { f: LocalLaw::Pow, r, sign, lipschitz_hint: None }
    }

    pub fn lipschitz_hint(&self) -> Option<f64> {
        match self {
            Self::LocalPrimitive { lipschitz_hint, .. }
            | Self::GradientDependent { lipschitz_hint, .. }
            | Self::NonlocalConvolution { lipschitz_hint, .. } => *lipschitz_hint,
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MfgError::InvalidInput(msg));
        match self {
            Self::Zero {} => Ok(()),
            Self::LocalPrimitive { r, sign, .. } => {
                if !(*r > 0.0 && r.is_finite()) {
                    return bad(format!("coupling exponent r must be positive, got {r}"));
                }
                if sign.abs() != 1.0 {
                    return bad(format!("coupling sign must be +1 or -1, got {sign}"));
                }
                Ok(())
            }
            Self::GradientDependent { weight, .. } => {
                if *weight < 0.0 || !weight.is_finite() {
                    return bad(format!("Dirichlet weight must be nonnegative, got {weight}"));
                }
                Ok(())
            }
            Self::NonlocalConvolution { radius, a, b, tilt, .. } => {
                if !(*radius > 0.0 && radius.is_finite()) {
                    return bad(format!("kernel radius must be positive, got {radius}"));
                }
                if *a < 0.0 || *b < 0.0 {
                    return bad("nonlocal coefficients a, b must be nonnegative".into());
                }
                if tilt[0].hypot(tilt[1]) >= 1.0 {
                    return bad("kernel tilt must have norm below 1".into());
                }
                Ok(())
            }
            Self::Frozen { .. } => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
struct Convolution {
    /// `(di, dj, weight)`; weights sum to 1.
    stencil: Vec<(isize, isize, f64)>,
    /// Nodes at max-norm distance at least `ε` from the boundary.
    eroded: Vec<usize>,
}

impl Convolution {
    fn new(op: &ConstraintOperator, radius: f64, tilt: [f64; 2]) -> Result<Self> {
        let g = op.grid();
        let (hx, hy) = (g.hx(), g.hy());
        let rx = (radius / hx).ceil() as isize;
        let ry = (radius / hy).ceil() as isize;
        let mut stencil = Vec::new();
        for dj in -ry..=ry {
            for di in -rx..=rx {
                let z = [di as f64 * hx / radius, dj as f64 * hy / radius];
                let s = z[0] * z[0] + z[1] * z[1];
                if s < 1.0 {
                    let v = (-1.0 / (1.0 - s)).exp() * (1.0 + tilt[0] * z[0] + tilt[1] * z[1]);
                    stencil.push((di, dj, v));
                }
            }
        }
        let total: f64 = stencil.iter().map(|s| s.2).sum();
        stencil.iter_mut().for_each(|s| s.2 /= total);
        let tol = 1e-12 * radius;
        let eroded: Vec<usize> =
            (0..g.node_count()).filter(|&k| g.boundary_distance(k) >= radius - tol).collect();
        if eroded.is_empty() {
            return Err(MfgError::InvalidInput(format!(
                "kernel radius {radius} leaves no interior nodes"
            )));
        }
        Ok(Self { stencil, eroded })
    }

    fn neighbor(op: &ConstraintOperator, k: usize, di: isize, dj: isize) -> usize {
        let g = op.grid();
        let (i, j) = g.ij(k);
        g.index((i as isize + di) as usize, (j as isize + dj) as usize)
    }

    /// `(ρ∗f)` on the eroded nodes, in the order of `eroded`.
    fn apply(&self, op: &ConstraintOperator, f: &[f64]) -> Vec<f64> {
        self.eroded
            .iter()
            .map(|&k| {
                self.stencil.iter().map(|&(di, dj, s)| s * f[Self::neighbor(op, k, di, dj)]).sum()
            })
            .collect()
    }

    /// Transpose of [`Convolution::apply`], scattering back to all nodes.
    fn apply_t(&self, op: &ConstraintOperator, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; op.node_count()];
        for (&k, &vk) in self.eroded.iter().zip(v) {
            for &(di, dj, s) in &self.stencil {
                out[Self::neighbor(op, k, di, dj)] += s * vk;
            }
        }
        out
    }
}

/// A coupling prepared for one grid.
#[derive(Debug, Clone)]
pub struct Coupling {
    spec: CouplingSpec,
    conv: Option<Convolution>,
}

impl Coupling {
    pub fn new(spec: &CouplingSpec, op: &ConstraintOperator) -> Result<Self> {
        spec.validate()?;
        let conv = match spec {
            CouplingSpec::NonlocalConvolution { radius, tilt, .. } => {
                Some(Convolution::new(op, *radius, *tilt)?)
            }
            CouplingSpec::Frozen { offset, .. } if offset.len() != op.node_count() => {
                return Err(MfgError::InvalidInput("frozen offset has the wrong length".into()));
            }
            _ => None,
        };
        Ok(Self { spec: spec.clone(), conv })
    }

    pub fn spec(&self) -> &CouplingSpec {
        &self.spec
    }

    pub fn value(&self, op: &ConstraintOperator, m: &[f64]) -> f64 {
        match &self.spec {
            CouplingSpec::Zero {} => 0.0,
            CouplingSpec::LocalPrimitive { r, sign, .. } => {
                op.integrate(&m.iter().map(|&z| pow_primitive(*r, *sign, z)).collect::<Vec<_>>())
            }
            CouplingSpec::GradientDependent { weight, .. } => {
                let am = op.apply_a(m);
                0.5 * weight * m.iter().zip(&am).map(|(a, b)| a * b).sum::<f64>()
            }
            CouplingSpec::NonlocalConvolution { a, b, .. } => {
                let conv = self.conv.as_ref().expect("prepared kernel");
                let w = op.weights();
                let cm = conv.apply(op, m);
                let mut total: f64 =
                    conv.eroded.iter().zip(&cm).map(|(&k, v)| 0.5 * a * w[k] * v * v).sum();
                if *b != 0.0 {
                    let grad = op.nodal_gradient(m);
                    for c in 0..2 {
                        let gc: Vec<f64> = grad.iter().map(|g| g[c]).collect();
                        let cg = conv.apply(op, &gc);
                        total += conv.eroded.iter().zip(&cg).map(|(&k, v)| 0.5 * b * w[k] * v * v).sum::<f64>();
                    }
                }
                total
            }
            CouplingSpec::Frozen { self_coeff, offset } => op.integrate(
                &m.iter().zip(offset).map(|(&z, o)| 0.5 * self_coeff * z * z + o * z).collect::<Vec<_>>(),
            ),
        }
    }

    pub fn derivative(&self, op: &ConstraintOperator, m: &[f64]) -> DiscreteField {
        let n = op.node_count();
        match &self.spec {
            CouplingSpec::Zero {} => DiscreteField::zeros(n),
            CouplingSpec::LocalPrimitive { r, sign, .. } => {
                m.iter().map(|&z| pow_law(*r, *sign, z)).collect::<Vec<_>>().into()
            }
            CouplingSpec::GradientDependent { weight, .. } => op
                .apply_a(m)
                .iter()
                .zip(op.weights())
                .map(|(a, w)| weight * a / w)
                .collect::<Vec<_>>()
                .into(),
            CouplingSpec::NonlocalConvolution { a, b, .. } => {
                let conv = self.conv.as_ref().expect("prepared kernel");
                let w = op.weights();
                let cm = conv.apply(op, m);
                let scaled: Vec<f64> = conv.eroded.iter().zip(&cm).map(|(&k, v)| a * w[k] * v).collect();
                let mut euclid = conv.apply_t(op, &scaled);
                if *b != 0.0 {
                    // d/dz of Σ ω (ρ∗∇_h m)·(ρ∗∇_h z), with ∇_h z = −Ω⁻¹Bᵀz.
                    let grad = op.nodal_gradient(m);
                    let mut v = vec![[0.0, 0.0]; n];
                    for c in 0..2 {
                        let gc: Vec<f64> = grad.iter().map(|g| g[c]).collect();
                        let cg = conv.apply(op, &gc);
                        let s: Vec<f64> =
                            conv.eroded.iter().zip(&cg).map(|(&k, x)| b * w[k] * x).collect();
                        for (k, t) in conv.apply_t(op, &s).into_iter().enumerate() {
                            v[k][c] = t / w[k];
                        }
                    }
                    let bv = op.apply_b(&v.into());
                    euclid.iter_mut().zip(&bv).for_each(|(e, x)| *e -= x);
                }
                euclid.iter().zip(w).map(|(e, wk)| e / wk).collect::<Vec<_>>().into()
            }
            CouplingSpec::Frozen { self_coeff, offset } => {
                m.iter().zip(offset).map(|(&z, o)| self_coeff * z + o).collect::<Vec<_>>().into()
            }
        }
    }

    /// Whether the derivative is linear in `m`.
    fn is_linear(&self) -> bool {
        match &self.spec {
            CouplingSpec::LocalPrimitive { r, .. } => *r == 1.0,
            _ => true,
        }
    }

    /// Lipschitz estimate for the derivative in the `ω` metric on densities
    /// bounded by `m_bound`.
    pub fn lipschitz(&self, op: &ConstraintOperator, m_bound: f64) -> f64 {
        if let Some(h) = self.spec.lipschitz_hint() {
            return h;
        }
        match &self.spec {
            CouplingSpec::Zero {} => 0.0,
            CouplingSpec::LocalPrimitive { r, .. } => {
                if *r >= 1.0 {
                    r * (m_bound.abs() + 1.0).powf(r - 1.0)
                } else {
                    1.0
                }
            }
            CouplingSpec::Frozen { self_coeff, .. } => self_coeff.abs(),
            _ => {
                debug_assert!(self.is_linear());
                1.05 * self.linear_spectral_radius(op)
            }
        }
    }

    /// Power iteration on the (self-adjoint in `ω`) linear derivative map.
    fn linear_spectral_radius(&self, op: &ConstraintOperator) -> f64 {
        let g = op.grid();
        let zero = self.derivative(op, &vec![0.0; op.node_count()]);
        let mut x: Vec<f64> = (0..g.node_count())
            .map(|k| {
                let (i, j) = g.ij(k);
                let s = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                s + 0.1 * ((i * 7 + j * 13) % 11) as f64 / 11.0
            })
            .collect();
        let mut rho = 0.0;
        for _ in 0..60 {
            let nrm = op.inner(&x, &x).sqrt();
            if nrm == 0.0 {
                return 0.0;
            }
            x.iter_mut().for_each(|v| *v /= nrm);
            let y: Vec<f64> = self.derivative(op, &x).iter().zip(zero.iter()).map(|(a, b)| a - b).collect();
            rho = op.inner(&y, &y).sqrt();
            x = y;
        }
        rho
    }

    pub fn is_convex(&self) -> bool {
        match &self.spec {
            CouplingSpec::Zero {} | CouplingSpec::GradientDependent { .. } => true,
            CouplingSpec::NonlocalConvolution { .. } => true,
            CouplingSpec::LocalPrimitive { sign, .. } => *sign > 0.0,
            CouplingSpec::Frozen { self_coeff, .. } => *self_coeff >= 0.0,
        }
    }

    pub fn is_strictly_convex(&self) -> bool {
        match &self.spec {
            CouplingSpec::LocalPrimitive { sign, .. } => *sign > 0.0,
            CouplingSpec::Frozen { self_coeff, .. } => *self_coeff > 0.0,
            _ => false,
        }
    }

    /// A constant `C_ℱ` with `ℱ(m) ≥ C_ℱ` for all `m ≥ 0`, when one exists.
    pub fn global_lower_bound(&self, op: &ConstraintOperator) -> Option<f64> {
        match &self.spec {
            CouplingSpec::Zero {} | CouplingSpec::GradientDependent { .. } => Some(0.0),
            CouplingSpec::NonlocalConvolution { .. } => Some(0.0),
            CouplingSpec::LocalPrimitive { sign, .. } => (*sign > 0.0).then_some(0.0),
            CouplingSpec::Frozen { self_coeff, offset } => {
                if *self_coeff > 0.0 {
                    let per: Vec<f64> =
                        offset.iter().map(|o| if *o < 0.0 { -o * o / (2.0 * self_coeff) } else { 0.0 }).collect();
                    Some(op.integrate(&per))
                } else if *self_coeff == 0.0 && offset.iter().all(|o| *o >= 0.0) {
                    Some(0.0)
                } else {
                    None
                }
            }
        }
    }

    /// `C_R` with `ℱ(m) ≥ C_R` whenever `0 ≤ m ≤ R`.
    pub fn lower_bound_on(&self, op: &ConstraintOperator, radius: f64) -> f64 {
        match &self.spec {
            CouplingSpec::LocalPrimitive { r, sign, .. } => {
                let worst = if *sign > 0.0 { 0.0 } else { pow_primitive(*r, *sign, radius) };
                worst * op.grid().area()
            }
            CouplingSpec::Frozen { self_coeff, offset } => {
                let per: Vec<f64> = offset
                    .iter()
                    .map(|&o| {
                        let f = |z: f64| 0.5 * self_coeff * z * z + o * z;
                        let mut best = f(0.0).min(f(radius));
                        if *self_coeff > 0.0 {
                            let z = (-o / self_coeff).clamp(0.0, radius);
                            best = best.min(f(z));
                        }
                        best
                    })
                    .collect();
                op.integrate(&per)
            }
            _ => 0.0,
        }
    }

    /// `(r, sign)` for the local power law.
    pub fn power_law(&self) -> Option<(f64, f64)> {
        match &self.spec {
            CouplingSpec::LocalPrimitive { r, sign, .. } => Some((*r, *sign)),
            _ => None,
        }
    }
}

/// `sign·sgn(z)|z|^r`.
#[inline]
pub fn pow_law(r: f64, sign: f64, z: f64) -> f64 {
    if z == 0.0 {
        0.0
    } else {
        sign * z.signum() * z.abs().powf(r)
    }
}

/// `sign·|z|^{r+1}/(r+1)`, the primitive of [`pow_law`] vanishing at 0.
#[inline]
pub fn pow_primitive(r: f64, sign: f64, z: f64) -> f64 {
    sign * z.abs().powf(r + 1.0) / (r + 1.0)
}

pub fn coupling_value(spec: &CouplingSpec, op: &ConstraintOperator, m: &DiscreteField) -> Result<f64> {
    Ok(Coupling::new(spec, op)?.value(op, m))
}

pub fn coupling_derivative(
    spec: &CouplingSpec,
    op: &ConstraintOperator,
    m: &DiscreteField,
) -> Result<DiscreteField> {
    Ok(Coupling::new(spec, op)?.derivative(op, m))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub radius: f64,
    /// Minimum of the primitive over `z ∈ [0, R]`.
    pub min_primitive: f64,
    /// Maximum of `|f|` over `z ∈ [0, R]`.
    pub max_abs_f: f64,
    /// Primitive sampled up to `10R` still trends upward or flat at the far end.
    pub global_lower_bound_plausible: bool,
    /// Primitive at `5R` and `10R`, for the trend.
    pub far_primitive: [f64; 2],
    pub monotone: bool,
    pub convex_in_gradient: bool,
}

type ScalarFn = Box<dyn Fn(f64) -> f64>;

/// Samples the local law on `[0, R]` (and up to `10R` for the trend).
pub fn check_admissibility(spec: &CouplingSpec, radius: f64) -> Result<AdmissibilityReport> {
    spec.validate()?;
    if !(radius > 0.0) {
        return Err(MfgError::InvalidInput(format!("radius must be positive, got {radius}")));
    }
    let (f, prim): (ScalarFn, ScalarFn) = match spec {
        CouplingSpec::LocalPrimitive { r, sign, .. } => {
            let (r, s) = (*r, *sign);
            (Box::new(move |z| pow_law(r, s, z)), Box::new(move |z| pow_primitive(r, s, z)))
        }
        CouplingSpec::Frozen { self_coeff, offset } => {
            let s = *self_coeff;
            let lo = offset.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
            (Box::new(move |z| s * z + lo), Box::new(move |z| 0.5 * s * z * z + lo * z))
        }
        // Zero, Dirichlet and nonlocal quadratics have no pointwise z-dependence.
        _ => (Box::new(|_| 0.0), Box::new(|_| 0.0)),
    };
    let samples = 1000;
    let mut min_primitive = f64::INFINITY;
    let mut max_abs_f: f64 = 0.0;
    let mut monotone = true;
    let mut prev = f64::NEG_INFINITY;
    for k in 0..=samples {
        let z = radius * k as f64 / samples as f64;
        let fz = f(z);
        min_primitive = min_primitive.min(prim(z));
        max_abs_f = max_abs_f.max(fz.abs());
        if fz < prev - 1e-12 * (1.0 + prev.abs()) {
            monotone = false;
        }
        prev = fz;
    }
    let far = [prim(5.0 * radius), prim(10.0 * radius)];
    let plausible = far[1] >= far[0] - 1e-12 * (1.0 + far[0].abs());
    Ok(AdmissibilityReport {
        radius,
        min_primitive,
        max_abs_f,
        global_lower_bound_plausible: plausible,
        far_primitive: far,
        monotone,
        convex_in_gradient: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretization::GridSpec;

    fn op(n: usize) -> ConstraintOperator {
        ConstraintOperator::build(&GridSpec::unit_square(n).unwrap())
    }

    #[test]
    fn value_examples() {
        let op = op(9);
        let n = op.node_count();
        let ones = DiscreteField::constant(n, 1.0);
        assert_eq!(coupling_value(&CouplingSpec::Zero {}, &op, &ones).unwrap(), 0.0);
        let lin = CouplingSpec::power(1.0, 1.0);
        assert!((coupling_value(&lin, &op, &ones).unwrap() - 0.5).abs() < 1e-14);
        let dir = CouplingSpec::GradientDependent { weight: 1.0, lipschitz_hint: None };
        assert!(coupling_value(&dir, &op, &DiscreteField::constant(n, 2.5)).unwrap().abs() < 1e-13);
    }

    #[test]
    fn derivative_examples() {
        let op = op(9);
        let n = op.node_count();
        let m = DiscreteField::from_fn(op.grid(), |[x, y]| 1.0 + x - 0.5 * y * y);
        assert!(coupling_derivative(&CouplingSpec::Zero {}, &op, &m).unwrap().iter().all(|v| *v == 0.0));
        assert_eq!(coupling_derivative(&CouplingSpec::power(1.0, 1.0), &op, &m).unwrap(), m);
        let mut three = DiscreteField::zeros(n);
        three[4] = 3.0;
        assert_eq!(coupling_derivative(&CouplingSpec::power(2.0, 1.0), &op, &three).unwrap()[4], 9.0);
    }

    #[test]
    fn admissibility_examples() {
        let r = check_admissibility(&CouplingSpec::power(1.0, 1.0), 5.0).unwrap();
        assert_eq!(r.min_primitive, 0.0);
        assert_eq!(r.max_abs_f, 5.0);
        assert!(r.monotone && r.global_lower_bound_plausible);

        let r = check_admissibility(&CouplingSpec::power(2.0, -1.0), 2.0).unwrap();
        assert!((r.min_primitive + 8.0 / 3.0).abs() < 1e-12);
        assert!(!r.global_lower_bound_plausible);
        assert!(!r.monotone);

        let r = check_admissibility(&CouplingSpec::Zero {}, 1.0).unwrap();
        assert_eq!((r.min_primitive, r.max_abs_f), (0.0, 0.0));
        assert!(r.monotone);
    }

    #[test]
    fn dirichlet_lipschitz_matches_stiffness_scale() {
        let op = op(17);
        let c = Coupling::new(&CouplingSpec::GradientDependent { weight: 1.0, lipschitz_hint: None }, &op).unwrap();
        let l = c.lipschitz(&op, 1.0);
        // The largest eigenvalue of Ω⁻¹A for Q1 on a uniform grid is about 12/h² (corner nodes).
        let h = 1.0 / 16.0;
        assert!(l > 4.0 / (h * h) && l < 40.0 / (h * h), "{l}");
    }

    #[test]
    fn config_parsing() {
        let s: CouplingSpec =
            serde_json::from_str(r#"{"kind":"local_primitive","f":"pow","r":2.0,"sign":-1}"#).unwrap();
        assert_eq!(s, CouplingSpec::power(2.0, -1.0));
        assert!(serde_json::from_str::<CouplingSpec>(r#"{"kind":"zero","extra":1}"#).is_err());
        assert!(serde_json::from_str::<CouplingSpec>(r#"{"kind":"frozen","self_coeff":1,"offset":[]}"#).is_err());
    }
}
