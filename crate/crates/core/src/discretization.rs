//! Q1 finite elements on a uniform rectangular grid with natural (no-flux)
//! boundary conditions.
//!
//! Nodes are numbered row-major, `k = j·(nx + 1) + i`. The constraint
//! operator collects
//!
//! * the stiffness matrix `A`, `⟨Am, φ⟩ = ∫∇m_h·∇φ_h`,
//! * the coupling matrix `B` acting on stacked momenta `(w_x, w_y)`,
//!   `(Bw)_j = −∫ w_h·∇φ_j` with `w_h` the bilinear interpolant,
//! * the lumped mass weights `ω`.
//!
//! The discrete gradient [`nodal_gradient`] is the `φ`-weighted patch average
//! `(∇_h u)_k = ω_k⁻¹ ∫ φ_k ∇u_h`, which is exactly the adjoint of `B`:
//! `Bᵀu = −Ω ∇_h u`.

use std::ops::{Deref, DerefMut};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sprs::{CsMat, TriMat};

use crate::error::{MfgError, Result};
use crate::hamiltonian::{norm2, Vec2};
use crate::linalg::BandedCholesky;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lx: f64,
    pub ly: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn new(lx: f64, ly: f64, nx: usize, ny: usize) -> Result<Self> {
        let grid = Self { lx, ly, nx, ny };
        grid.validate()?;
        Ok(grid)
    }

    /// `[0, 1]²` with `nodes × nodes` grid points.
    pub fn unit_square(nodes: usize) -> Result<Self> {
        Self::new(1.0, 1.0, nodes.saturating_sub(1), nodes.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lx > 0.0 && self.ly > 0.0 && self.lx.is_finite() && self.ly.is_finite()) {
            return Err(MfgError::InvalidInput(format!(
                "domain lengths must be positive and finite, got {} x {}",
                self.lx, self.ly
            )));
        }
        if self.nx == 0 || self.ny == 0 {
            return Err(MfgError::InvalidInput("grid needs at least one cell per direction".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn hx(&self) -> f64 {
        self.lx / self.nx as f64
    }

    #[inline]
    pub fn hy(&self) -> f64 {
        self.ly / self.ny as f64
    }

    #[inline]
    pub fn nodes_x(&self) -> usize {
        self.nx + 1
    }

    #[inline]
    pub fn nodes_y(&self) -> usize {
        self.ny + 1
    }

    #[inline]
    pub fn node_count(&self) -> usize {
        self.nodes_x() * self.nodes_y()
    }

    pub fn area(&self) -> f64 {
        self.lx * self.ly
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nodes_x() + i
    }

    #[inline]
    pub fn ij(&self, k: usize) -> (usize, usize) {
        (k % self.nodes_x(), k / self.nodes_x())
    }

    #[inline]
    pub fn node(&self, k: usize) -> Vec2 {
        let (i, j) = self.ij(k);
        [i as f64 * self.hx(), j as f64 * self.hy()]
    }

    /// Global indices of the corners of cell `(ci, cj)`, local order
    /// `(0,0), (1,0), (0,1), (1,1)`.
    #[inline]
    fn cell_nodes(&self, ci: usize, cj: usize) -> [usize; 4] {
        let k = self.index(ci, cj);
        let nxp = self.nodes_x();
        [k, k + 1, k + nxp, k + nxp + 1]
    }

    /// Distance of node `k` to the boundary in the max-norm sense.
    pub fn boundary_distance(&self, k: usize) -> f64 {
        let [x, y] = self.node(k);
        x.min(self.lx - x).min(y).min(self.ly - y)
    }
}

/// Nodal scalar values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DiscreteField(pub Vec<f64>);

impl DiscreteField {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn constant(n: usize, value: f64) -> Self {
        Self(vec![value; n])
    }

    pub fn from_fn(grid: &GridSpec, f: impl Fn(Vec2) -> f64) -> Self {
        Self((0..grid.node_count()).map(|k| f(grid.node(k))).collect())
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for DiscreteField {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for DiscreteField {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for DiscreteField {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Nodal 2-vector values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DiscreteVectorField(pub Vec<Vec2>);

impl DiscreteVectorField {
    pub fn zeros(n: usize) -> Self {
        Self(vec![[0.0, 0.0]; n])
    }

    pub fn from_fn(grid: &GridSpec, f: impl Fn(Vec2) -> Vec2) -> Self {
        Self((0..grid.node_count()).map(|k| f(grid.node(k))).collect())
    }

    pub fn max_norm(&self) -> f64 {
        self.iter().fold(0.0, |a, v| a.max(norm2(*v)))
    }

    /// Stacked layout `(v_x[0..n], v_y[0..n])` used by `B`.
    pub fn to_stacked(&self) -> Vec<f64> {
        let n = self.len();
        let mut out = vec![0.0; 2 * n];
        for (k, v) in self.iter().enumerate() {
            out[k] = v[0];
            out[n + k] = v[1];
        }
        out
    }

    pub fn from_stacked(s: &[f64]) -> Self {
        let n = s.len() / 2;
        Self((0..n).map(|k| [s[k], s[n + k]]).collect())
    }
}

impl Deref for DiscreteVectorField {
    type Target = [Vec2];
    fn deref(&self) -> &[Vec2] {
        &self.0
    }
}

impl DerefMut for DiscreteVectorField {
    fn deref_mut(&mut self) -> &mut [Vec2] {
        &mut self.0
    }
}

impl From<Vec<Vec2>> for DiscreteVectorField {
    fn from(v: Vec<Vec2>) -> Self {
        Self(v)
    }
}

/// Lumped-quadrature norms of a field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Norms {
    pub lq: f64,
    pub linf: f64,
    pub w1q: f64,
}

/// Assembled operators `A`, `B`, `ω` with cached factorizations.
#[derive(Debug)]
pub struct ConstraintOperator {
    grid: GridSpec,
    weights: Vec<f64>,
    a: CsMat<f64>,
    b: CsMat<f64>,
    fp_factor: OnceLock<BandedCholesky>,
    projection_factor: OnceLock<BandedCholesky>,
}

impl Clone for ConstraintOperator {
    fn clone(&self) -> Self {
        Self {
            grid: self.grid,
            weights: self.weights.clone(),
            a: self.a.clone(),
            b: self.b.clone(),
            fp_factor: self.fp_factor.clone(),
            projection_factor: self.projection_factor.clone(),
        }
    }
}

pub fn build_operators(grid: &GridSpec) -> ConstraintOperator {
    ConstraintOperator::build(grid)
}

// 1-D reference matrices on an interval of length h.
fn mass_1d(h: f64) -> [[f64; 2]; 2] {
    [[h / 3.0, h / 6.0], [h / 6.0, h / 3.0]]
}

fn stiffness_1d(h: f64) -> [[f64; 2]; 2] {
    [[1.0 / h, -1.0 / h], [-1.0 / h, 1.0 / h]]
}

const LOCAL: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];

impl ConstraintOperator {
    pub fn build(grid: &GridSpec) -> Self {
        let n = grid.node_count();
        let (hx, hy) = (grid.hx(), grid.hy());
        let (mx, my) = (mass_1d(hx), mass_1d(hy));
        let (sx, sy) = (stiffness_1d(hx), stiffness_1d(hy));
        // ∫ φ_k φ_j′ over an interval is ±1/2 by the sign of φ_j′.
        let half = [-0.5, 0.5];

        let mut a = TriMat::with_capacity((n, n), 16 * grid.nx * grid.ny);
        let mut b = TriMat::with_capacity((n, 2 * n), 32 * grid.nx * grid.ny);
        let mut weights = vec![0.0; n];
        for cj in 0..grid.ny {
            for ci in 0..grid.nx {
                let nodes = grid.cell_nodes(ci, cj);
                for (lj, &(aj, bj)) in LOCAL.iter().enumerate() {
                    let gj = nodes[lj];
                    weights[gj] += 0.25 * hx * hy;
                    for (lk, &(ak, bk)) in LOCAL.iter().enumerate() {
                        let gk = nodes[lk];
                        a.add_triplet(gj, gk, sx[aj][ak] * my[bj][bk] + mx[aj][ak] * sy[bj][bk]);
                        b.add_triplet(gj, gk, -half[aj] * my[bj][bk]);
                        b.add_triplet(gj, n + gk, -half[bj] * mx[aj][ak]);
                    }
                }
            }
        }
        Self {
            grid: *grid,
            weights,
            a: a.to_csr(),
            b: b.to_csr(),
            fp_factor: OnceLock::new(),
            projection_factor: OnceLock::new(),
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn stiffness(&self) -> &CsMat<f64> {
        &self.a
    }

    pub fn coupling(&self) -> &CsMat<f64> {
        &self.b
    }

    pub fn node_count(&self) -> usize {
        self.weights.len()
    }

    /// `⟨ω, f⟩`.
    pub fn integrate(&self, f: &[f64]) -> f64 {
        self.weights.iter().zip(f).map(|(w, v)| w * v).sum()
    }

    /// `⟨f, g⟩_ω`.
    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        self.weights.iter().zip(f).zip(g).map(|((w, a), b)| w * a * b).sum()
    }

    /// `A m`, evaluated as `Σ_j a_kj (m_j − m_k)` so that constants map to
    /// exactly zero; the rows of `A` sum to zero.
    pub fn apply_a(&self, m: &[f64]) -> Vec<f64> {
        self.a
            .outer_iterator()
            .enumerate()
            .map(|(k, row)| row.iter().filter(|(j, _)| *j != k).map(|(j, &v)| v * (m[j] - m[k])).sum())
            .collect()
    }

    pub fn apply_b(&self, w: &DiscreteVectorField) -> Vec<f64> {
        spmv(&self.b, &w.to_stacked())
    }

    pub fn apply_bt(&self, u: &[f64]) -> DiscreteVectorField {
        let n = self.node_count();
        let mut out = vec![0.0; 2 * n];
        for (j, row) in self.b.outer_iterator().enumerate() {
            let uj = u[j];
            for (c, &v) in row.iter() {
                out[c] += v * uj;
            }
        }
        DiscreteVectorField::from_stacked(&out)
    }

    /// Symmetric permutation that orders nodes along the shorter side first.
    fn band_permutation(&self) -> Option<Vec<usize>> {
        let g = &self.grid;
        (g.ny < g.nx).then(|| {
            (0..g.node_count())
                .map(|k| {
                    let (i, j) = g.ij(k);
                    i * g.nodes_y() + j
                })
                .collect()
        })
    }

    fn cached(
        lock: &OnceLock<BandedCholesky>,
        make: impl FnOnce() -> Result<BandedCholesky>,
    ) -> Result<&BandedCholesky> {
        if let Some(f) = lock.get() {
            return Ok(f);
        }
        let f = make()?;
        let _ = lock.set(f);
        Ok(lock.get().expect("factor cached"))
    }

    /// Factor of `A + s·e₀e₀ᵀ`, positive definite since `ker A` is the constants.
    fn fp_factor(&self) -> Result<&BandedCholesky> {
        Self::cached(&self.fp_factor, || {
            let n = self.node_count();
            let pin = self.a.get(0, 0).copied().unwrap_or(1.0);
            let entries = self.a.iter().map(|(&v, (r, c))| (r, c, v)).chain([(0, 0, pin)]);
            BandedCholesky::factor(n, entries, self.band_permutation())
        })
    }

    /// Factor of `M + s·e₀e₀ᵀ` with `M = AΩ⁻¹A + BΩ⁻¹Bᵀ`.
    pub(crate) fn projection_factor(&self) -> Result<&BandedCholesky> {
        Self::cached(&self.projection_factor, || {
            let n = self.node_count();
            let mut inv = TriMat::new((2 * n, 2 * n));
            for (k, w) in self.weights.iter().enumerate() {
                inv.add_triplet(k, k, 1.0 / w);
                inv.add_triplet(n + k, n + k, 1.0 / w);
            }
            let inv: CsMat<f64> = inv.to_csr();
            let mut inv_n = TriMat::new((n, n));
            for (k, w) in self.weights.iter().enumerate() {
                inv_n.add_triplet(k, k, 1.0 / w);
            }
            let inv_n: CsMat<f64> = inv_n.to_csr();
            let bt: CsMat<f64> = self.b.transpose_view().to_csr();
            let aa = &(&self.a * &inv_n) * &self.a;
            let bb = &(&self.b * &inv) * &bt;
            let m = &aa + &bb;
            let pin = m.get(0, 0).copied().unwrap_or(1.0);
            let entries = m.iter().map(|(&v, (r, c))| (r, c, v)).chain([(0, 0, pin)]);
            BandedCholesky::factor(n, entries, self.band_permutation())
        })
    }

    /// Solves `M μ = r` for a right-hand side with zero sum, returning the
    /// solution normalized to zero sum. One step of iterative refinement.
    pub(crate) fn solve_projection(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let f = self.projection_factor()?;
        let r = remove_sum(rhs);
        let mut x = f.solve(&r);
        let mx = self.apply_m(&x);
        let res: Vec<f64> = r.iter().zip(&mx).map(|(a, b)| a - b).collect();
        let dx = f.solve(&remove_sum(&res));
        x.iter_mut().zip(&dx).for_each(|(a, d)| *a += d);
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        x.iter_mut().for_each(|a| *a -= mean);
        Ok(x)
    }

    /// `M x = AΩ⁻¹A x + BΩ⁻¹Bᵀ x`.
    pub(crate) fn apply_m(&self, x: &[f64]) -> Vec<f64> {
        let ax = self.apply_a(x);
        let t: Vec<f64> = ax.iter().zip(&self.weights).map(|(a, w)| a / w).collect();
        let mut out = self.apply_a(&t);
        let mut bt = self.apply_bt(x);
        for (v, w) in bt.iter_mut().zip(&self.weights) {
            v[0] /= w;
            v[1] /= w;
        }
        let bb = self.apply_b(&bt);
        out.iter_mut().zip(&bb).for_each(|(a, b)| *a += b);
        out
    }

    /// The unique `m` with `Am = −Bw` and `⟨ω, m⟩ = 1`.
    pub fn solve_fp_linear(&self, w: &DiscreteVectorField) -> Result<DiscreteField> {
        let f = self.fp_factor()?;
        let rhs: Vec<f64> = self.apply_b(w).iter().map(|v| -v).collect();
        let rhs = remove_sum(&rhs);
        let mut m = f.solve(&rhs);
        let am = self.apply_a(&m);
        let res: Vec<f64> = rhs.iter().zip(&am).map(|(r, a)| r - a).collect();
        let dm = f.solve(&remove_sum(&res));
        m.iter_mut().zip(&dm).for_each(|(a, d)| *a += d);
        let shift = (1.0 - self.integrate(&m)) / self.grid.area();
        m.iter_mut().for_each(|v| *v += shift);
        Ok(DiscreteField(m))
    }

    pub fn nodal_gradient(&self, u: &[f64]) -> DiscreteVectorField {
        nodal_gradient_with_weights(&self.grid, &self.weights, u)
    }

    /// Lumped `‖f‖_q`, max-norm and `‖f‖_{1,q}` of a scalar field.
    pub fn norms(&self, f: &[f64], q: f64) -> Norms {
        let lq = self.lq_norm(f, q);
        let grad = self.nodal_gradient(f);
        let gq = self.lq_norm_vec(&grad, q);
        Norms {
            lq,
            linf: f.iter().fold(0.0, |a, v| a.max(v.abs())),
            w1q: (lq.powf(q) + gq.powf(q)).powf(1.0 / q),
        }
    }

    pub fn lq_norm(&self, f: &[f64], q: f64) -> f64 {
        self.integrate(&f.iter().map(|v| v.abs().powf(q)).collect::<Vec<_>>())
            .powf(1.0 / q)
    }

    pub fn lq_norm_vec(&self, f: &[Vec2], q: f64) -> f64 {
        self.integrate(&f.iter().map(|v| norm2(*v).powf(q)).collect::<Vec<_>>())
            .powf(1.0 / q)
    }

    /// Relative constraint residual `‖Am + Bw‖₂ / (1 + ‖Bw‖₂)`.
    pub fn fp_residual(&self, m: &[f64], w: &DiscreteVectorField) -> f64 {
        let am = self.apply_a(m);
        let bw = self.apply_b(w);
        let r: f64 = am.iter().zip(&bw).map(|(a, b)| (a + b).powi(2)).sum::<f64>().sqrt();
        let s: f64 = bw.iter().map(|b| b * b).sum::<f64>().sqrt();
        r / (1.0 + s)
    }
}

fn remove_sum(v: &[f64]) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

pub(crate) fn spmv(a: &CsMat<f64>, x: &[f64]) -> Vec<f64> {
    a.outer_iterator()
        .map(|row| row.iter().map(|(c, &v)| v * x[c]).sum())
        .collect()
}

/// Lumped weights `ω_k = hx·hy·(number of cells touching k)/4`.
pub fn lumped_weights(grid: &GridSpec) -> Vec<f64> {
    let quarter = 0.25 * grid.hx() * grid.hy();
    (0..grid.node_count())
        .map(|k| {
            let (i, j) = grid.ij(k);
            let cx = if i == 0 || i == grid.nx { 1.0 } else { 2.0 };
            let cy = if j == 0 || j == grid.ny { 1.0 } else { 2.0 };
            quarter * cx * cy
        })
        .collect()
}

/// `(∇_h u)_k = ω_k⁻¹ ∫ φ_k ∇u_h`, evaluated cell by cell in closed form.
pub fn nodal_gradient(grid: &GridSpec, u: &[f64]) -> DiscreteVectorField {
    nodal_gradient_with_weights(grid, &lumped_weights(grid), u)
}

fn nodal_gradient_with_weights(grid: &GridSpec, weights: &[f64], u: &[f64]) -> DiscreteVectorField {
    let (hx, hy) = (grid.hx(), grid.hy());
    let c = 0.5 * hx * hy;
    let mut acc = vec![[0.0, 0.0]; grid.node_count()];
    for cj in 0..grid.ny {
        for ci in 0..grid.nx {
            let [k00, k10, k01, k11] = grid.cell_nodes(ci, cj);
            let dx_b = (u[k10] - u[k00]) / hx;
            let dx_t = (u[k11] - u[k01]) / hx;
            let dy_l = (u[k01] - u[k00]) / hy;
            let dy_r = (u[k11] - u[k10]) / hy;
            let gx_b = c * (dx_b / 3.0 + dx_t / 6.0);
            let gx_t = c * (dx_b / 6.0 + dx_t / 3.0);
            let gy_l = c * (dy_l / 3.0 + dy_r / 6.0);
            let gy_r = c * (dy_l / 6.0 + dy_r / 3.0);
            acc[k00][0] += gx_b;
            acc[k10][0] += gx_b;
            acc[k01][0] += gx_t;
            acc[k11][0] += gx_t;
            acc[k00][1] += gy_l;
            acc[k01][1] += gy_l;
            acc[k10][1] += gy_r;
            acc[k11][1] += gy_r;
        }
    }
    for (g, w) in acc.iter_mut().zip(weights) {
        g[0] /= w;
        g[1] /= w;
    }
    DiscreteVectorField(acc)
}
