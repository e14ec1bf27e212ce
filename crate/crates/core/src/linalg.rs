//! Banded Cholesky factorization for the symmetric positive definite systems
//! that arise on structured grids.

use crate::error::{MfgError, Result};

/// Upper limit on stored band entries (about 2 GiB of `f64`).
const MAX_BAND_ENTRIES: usize = 1 << 28;

/// `L Lᵀ` factor of a symmetric positive definite band matrix, stored row-wise
/// as the lower band. An optional symmetric permutation is applied on entry and
/// exit of [`BandedCholesky::solve`].
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    bandwidth: usize,
    // Row i holds L[i][i - bandwidth ..= i]; entries before column 0 are unused.
    band: Vec<f64>,
    // perm[k] = position of original index k in the factored ordering.
    perm: Option<Vec<usize>>,
}

impl BandedCholesky {
    /// Factors the matrix whose entries are produced by `entries`, a list of
    /// `(row, col, value)` triplets in the original numbering. Duplicates are
    /// summed. Only the lower triangle (after permutation) is read, so the
    /// caller must supply a symmetric set of triplets.
    pub fn factor(
        n: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
        perm: Option<Vec<usize>>,
    ) -> Result<Self> {
        let triplets: Vec<(usize, usize, f64)> = triplets.into_iter().collect();
        let map = |k: usize| perm.as_ref().map_or(k, |p| p[k]);
        let bandwidth = triplets
            .iter()
            .map(|&(r, c, _)| map(r).abs_diff(map(c)))
            .max()
            .unwrap_or(0);
        let width = bandwidth + 1;
        if n.saturating_mul(width) > MAX_BAND_ENTRIES {
            // TODO: fall back to preconditioned conjugate gradients once grids outgrow the band budget.
            return Err(MfgError::LinearSolver(format!(
                "band factor of {n} unknowns with bandwidth {bandwidth} exceeds the memory budget"
            )));
        }
        let mut band = vec![0.0; n * width];
        for (r, c, v) in triplets {
            let (r, c) = (map(r), map(c));
            if c <= r {
                band[r * width + (bandwidth + c - r)] += v;
            }
        }

        for i in 0..n {
            let j0 = i.saturating_sub(bandwidth);
            for j in j0..=i {
                let k0 = j0.max(j.saturating_sub(bandwidth));
                let mut s = band[i * width + (bandwidth + j - i)];
                for k in k0..j {
                    s -= band[i * width + (bandwidth + k - i)] * band[j * width + (bandwidth + k - j)];
                }
                if j == i {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(MfgError::LinearSolver(format!(
                            "matrix is not positive definite (pivot {s:e} at row {i})"
                        )));
                    }
                    band[i * width + bandwidth] = s.sqrt();
                } else {
                    band[i * width + (bandwidth + j - i)] = s / band[j * width + bandwidth];
                }
            }
        }
        Ok(Self { n, bandwidth, band, perm })
    }

    #[cfg(test)]
    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        assert_eq!(rhs.len(), self.n, "right-hand side length mismatch");
        let width = self.bandwidth + 1;
        let bw = self.bandwidth;
        let mut y = vec![0.0; self.n];
        match &self.perm {
            Some(p) => rhs.iter().enumerate().for_each(|(k, &v)| y[p[k]] = v),
            None => y.copy_from_slice(rhs),
        }
        // forward: L y = b
        for i in 0..self.n {
            let row = &self.band[i * width..(i + 1) * width];
            let mut s = y[i];
            for k in i.saturating_sub(bw)..i {
                s -= row[bw + k - i] * y[k];
            }
            y[i] = s / row[bw];
        }
        // backward: Lᵀ x = y
        for i in (0..self.n).rev() {
            y[i] /= self.band[i * width + bw];
            let yi = y[i];
            let row = &self.band[i * width..(i + 1) * width];
            for k in i.saturating_sub(bw)..i {
                y[k] -= row[bw + k - i] * yi;
            }
        }
        match &self.perm {
            Some(p) => (0..self.n).map(|k| y[p[k]]).collect(),
            None => y,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_tridiagonal_system() {
        let n = 6;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 4.0));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -1.0));
            }
        }
        let f = BandedCholesky::factor(n, t.clone(), None).unwrap();
        assert_eq!(f.bandwidth(), 1);
        let x_true: Vec<f64> = (0..n).map(|i| i as f64 - 2.5).collect();
        let mut b = vec![0.0; n];
        for &(r, c, v) in &t {
            b[r] += v * x_true[c];
        }
        let x = f.solve(&b);
        for (a, e) in x.iter().zip(&x_true) {
            assert!((a - e).abs() < 1e-13);
        }
    }

    #[test]
    fn permutation_is_transparent() {
        // Arrow-free SPD matrix with a reversed ordering.
        let n = 5;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 3.0 + i as f64));
            if i + 2 < n {
                t.push((i, i + 2, 1.0));
                t.push((i + 2, i, 1.0));
            }
        }
        let perm: Vec<usize> = (0..n).rev().collect();
        let a = BandedCholesky::factor(n, t.clone(), None).unwrap();
        let b = BandedCholesky::factor(n, t, Some(perm)).unwrap();
        let rhs = [1.0, -2.0, 0.5, 3.0, 1.5];
        for (x, y) in a.solve(&rhs).iter().zip(b.solve(&rhs)) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_indefinite_matrix() {
        let t = vec![(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0)];
        assert!(matches!(
            BandedCholesky::factor(2, t, None),
            Err(MfgError::LinearSolver(_))
        ));
    }
}
