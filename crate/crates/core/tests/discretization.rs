use std::f64::consts::PI;

use mfg_core::discretization::{ConstraintOperator, DiscreteField, DiscreteVectorField, GridSpec};
use mfg_core::hamiltonian::Vec2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Value and gradient of the bilinear interpolant at local coordinates
/// `(s, t) ∈ [0, 1]²` of cell `(ci, cj)`.
fn q1_eval(g: &GridSpec, f: impl Fn(usize) -> f64, ci: usize, cj: usize, s: f64, t: f64) -> (f64, Vec2) {
    let (f00, f10) = (f(g.index(ci, cj)), f(g.index(ci + 1, cj)));
    let (f01, f11) = (f(g.index(ci, cj + 1)), f(g.index(ci + 1, cj + 1)));
    let v = f00 * (1.0 - s) * (1.0 - t) + f10 * s * (1.0 - t) + f01 * (1.0 - s) * t + f11 * s * t;
    let dx = ((f10 - f00) * (1.0 - t) + (f11 - f01) * t) / g.hx();
    let dy = ((f01 - f00) * (1.0 - s) + (f11 - f10) * s) / g.hy();
    (v, [dx, dy])
}

/// 2×2 Gauss quadrature over every cell; exact for the bilinear products used here.
fn gauss(g: &GridSpec, integrand: impl Fn(usize, usize, f64, f64) -> f64) -> f64 {
    let a = 0.5 - 0.5 / 3f64.sqrt();
    let pts = [a, 1.0 - a];
    let mut total = 0.0;
    for cj in 0..g.ny {
        for ci in 0..g.nx {
            for s in pts {
                for t in pts {
                    total += 0.25 * g.hx() * g.hy() * integrand(ci, cj, s, t);
                }
            }
        }
    }
    total
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_vector_field(rng: &mut ChaCha8Rng, n: usize) -> DiscreteVectorField {
    (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect::<Vec<_>>().into()
}

#[test]
fn single_cell_stiffness_matches_the_reference_element() {
    let g = GridSpec::new(1.0, 1.0, 1, 1).unwrap();
    let op = ConstraintOperator::build(&g);
    // Nodes 0 = (0,0), 1 = (1,0), 2 = (0,1), 3 = (1,1).
    let expected = [
        [4.0, -1.0, -1.0, -2.0],
        [-1.0, 4.0, -2.0, -1.0],
        [-1.0, -2.0, 4.0, -1.0],
        [-2.0, -1.0, -1.0, 4.0],
    ];
    let a = op.stiffness();
    for (i, row) in expected.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let got = a.get(i, j).copied().unwrap_or(0.0);
            assert!((got - v / 6.0).abs() < 1e-15, "A[{i}][{j}] = {got}");
        }
        let unit: Vec<f64> = (0..4).map(|k| if k == i { 1.0 } else { 0.0 }).collect();
        assert!(op.apply_a(&unit).iter().sum::<f64>().abs() < 1e-15);
    }
}

#[test]
fn constants_are_in_the_kernel() {
    for (lx, ly, nx, ny) in [(1.0, 1.0, 8, 8), (2.0, 0.5, 12, 5)] {
        let op = ConstraintOperator::build(&GridSpec::new(lx, ly, nx, ny).unwrap());
        let c = vec![3.25; op.node_count()];
        assert!(op.apply_a(&c).iter().all(|v| *v == 0.0));
        let w = DiscreteVectorField::from_fn(op.grid(), |_| [0.7, -1.3]);
        assert!(op.apply_b(&w).iter().sum::<f64>().abs() < 1e-13);
    }
}

#[test]
fn weights_sum_to_the_area() {
    let g = GridSpec::new(2.0, 0.75, 10, 7).unwrap();
    let op = ConstraintOperator::build(&g);
    assert_eq!(op.node_count(), 11 * 8);
    assert!(op.weights().iter().all(|w| *w > 0.0));
    assert!((op.weights().iter().sum::<f64>() - 1.5).abs() < 1e-14);
}

#[test]
fn operators_match_independent_quadrature() {
    let g = GridSpec::new(1.5, 1.0, 6, 5).unwrap();
    let op = ConstraintOperator::build(&g);
    let n = op.node_count();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let (m, phi) = (random_vec(&mut rng, n), random_vec(&mut rng, n));
        let w = random_vector_field(&mut rng, n);
        let a_ref = gauss(&g, |ci, cj, s, t| {
            let (_, gm) = q1_eval(&g, |k| m[k], ci, cj, s, t);
            let (_, gp) = q1_eval(&g, |k| phi[k], ci, cj, s, t);
            gm[0] * gp[0] + gm[1] * gp[1]
        });
        assert!((dot(&op.apply_a(&m), &phi) - a_ref).abs() < 1e-12);
        let b_ref = -gauss(&g, |ci, cj, s, t| {
            let (wx, _) = q1_eval(&g, |k| w[k][0], ci, cj, s, t);
            let (wy, _) = q1_eval(&g, |k| w[k][1], ci, cj, s, t);
            let (_, gp) = q1_eval(&g, |k| phi[k], ci, cj, s, t);
            wx * gp[0] + wy * gp[1]
        });
        let bw = op.apply_b(&w);
        assert!((dot(&bw, &phi) - b_ref).abs() < 1e-12);
        let btphi = op.apply_bt(&phi).to_stacked();
        assert!((dot(&w.to_stacked(), &btphi) - dot(&bw, &phi)).abs() < 1e-12);
    }
}

#[test]
fn stiffness_is_symmetric_positive_semidefinite() {
    let op = ConstraintOperator::build(&GridSpec::new(1.0, 2.0, 9, 14).unwrap());
    let a = op.stiffness();
    for (i, row) in a.outer_iterator().enumerate() {
        for (j, v) in row.iter() {
            assert!((v - a.get(j, i).copied().unwrap_or(f64::NAN)).abs() <= 1e-15);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let x = random_vec(&mut rng, op.node_count());
        assert!(dot(&op.apply_a(&x), &x) / dot(&x, &x) >= -1e-12);
    }
}

#[test]
fn linear_solve_examples() {
    let g = GridSpec::new(2.0, 1.0, 10, 6).unwrap();
    let op = ConstraintOperator::build(&g);
    let n = op.node_count();
    let m = op.solve_fp_linear(&DiscreteVectorField::zeros(n)).unwrap();
    assert!(m.iter().all(|v| (v - 0.5).abs() < 1e-13));
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..5 {
        let w = random_vector_field(&mut rng, n);
        let m = op.solve_fp_linear(&w).unwrap();
        assert!((op.integrate(&m) - 1.0).abs() < 1e-12);
        assert!(op.fp_residual(&m, &w) < 1e-10);
    }
}

fn manufactured_l2_error(cells: usize) -> f64 {
    let g = GridSpec::unit_square(cells + 1).unwrap();
    let op = ConstraintOperator::build(&g);
    // w = ∇cos(πx) has zero normal trace, so m = 1 + cos(πx).
    let w = DiscreteVectorField::from_fn(&g, |x| [-PI * (PI * x[0]).sin(), 0.0]);
    let m = op.solve_fp_linear(&w).unwrap();
    let err: Vec<f64> = (0..op.node_count()).map(|k| m[k] - 1.0 - (PI * g.node(k)[0]).cos()).collect();
    op.lq_norm(&err, 2.0)
}

#[test]
fn manufactured_solution_converges_at_second_order() {
    let e: Vec<f64> = [16, 32, 64].into_iter().map(manufactured_l2_error).collect();
    for pair in e.windows(2) {
        let order = (pair[0] / pair[1]).log2();
        assert!(order >= 1.9, "errors {e:?}");
    }
}

#[test]
fn nodal_gradient_examples() {
    let g = GridSpec::new(2.0, 1.0, 8, 5).unwrap();
    let op = ConstraintOperator::build(&g);
    let u = DiscreteField::from_fn(&g, |x| 0.3 - 1.7 * x[0] + 2.2 * x[1]);
    for d in op.nodal_gradient(&u).iter() {
        assert!((d[0] + 1.7).abs() < 1e-13 && (d[1] - 2.2).abs() < 1e-13);
    }
    let c = DiscreteField::constant(op.node_count(), 4.0);
    assert!(op.nodal_gradient(&c).iter().all(|d| *d == [0.0, 0.0]));
}

#[test]
fn nodal_gradient_is_second_order_in_the_interior() {
    let err = |cells: usize| {
        let g = GridSpec::unit_square(cells + 1).unwrap();
        let op = ConstraintOperator::build(&g);
        let d = op.nodal_gradient(&DiscreteField::from_fn(&g, |x| (PI * x[0]).cos()));
        (0..op.node_count())
            .filter(|&k| g.boundary_distance(k) > 0.0)
            .map(|k| (d[k][0] + PI * (PI * g.node(k)[0]).sin()).abs())
            .fold(0.0f64, f64::max)
    };
    let e: Vec<f64> = [16, 32, 64].into_iter().map(err).collect();
    for pair in e.windows(2) {
        assert!((pair[0] / pair[1]).log2() >= 1.9, "errors {e:?}");
    }
}

#[test]
fn norms_examples() {
    let unit = ConstraintOperator::build(&GridSpec::unit_square(7).unwrap());
    assert!((unit.norms(&vec![1.0; unit.node_count()], 3.0).lq - 1.0).abs() < 1e-14);
    let big = ConstraintOperator::build(&GridSpec::new(2.0, 2.0, 6, 6).unwrap());
    let n = big.norms(&vec![2.0; big.node_count()], 3.0);
    assert!((n.lq - 2.0 * 4f64.cbrt()).abs() < 1e-13);
    assert_eq!(n.linf, 2.0);
    assert!((n.w1q - n.lq).abs() < 1e-13);
    let z = big.norms(&vec![0.0; big.node_count()], 3.0);
    assert_eq!((z.lq, z.linf, z.w1q), (0.0, 0.0, 0.0));
}

/// Largest `‖m‖_{1,q} / (‖w‖_q + 1)` over smooth random momenta.
fn fitted_constant(cells: usize, q: f64) -> f64 {
    let g = GridSpec::unit_square(cells + 1).unwrap();
    let op = ConstraintOperator::build(&g);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let c: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w = DiscreteVectorField::from_fn(&g, |x| {
            let (sx, sy) = ((PI * x[0]).sin(), (PI * x[1]).sin());
            [c[0] + c[1] * sx + c[2] * (2.0 * PI * x[1]).cos() + c[3] * sx * sy, c[4] + c[5] * sy + c[6] * (2.0 * PI * x[0]).cos() + c[7] * sx * sy]
        });
        let m = op.solve_fp_linear(&w).unwrap();
        worst = worst.max(op.norms(&m, q).w1q / (op.lq_norm_vec(&w, q) + 1.0));
    }
    worst
}

#[test]
fn fitted_stability_constant_does_not_blow_up() {
    let c: Vec<f64> = [8, 16, 32].into_iter().map(|n| fitted_constant(n, 3.0)).collect();
    assert!(c.iter().all(|v| v.is_finite() && *v > 0.0));
    assert!(c[2] <= 1.25 * c[0], "fitted constants {c:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn b_is_adjoint_to_its_transpose(seed in any::<u64>(), nx in 2usize..9, ny in 2usize..9) {
        let op = ConstraintOperator::build(&GridSpec::new(1.0, 1.3, nx, ny).unwrap());
        let n = op.node_count();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (phi, w) = (random_vec(&mut rng, n), random_vector_field(&mut rng, n));
        let lhs = dot(&op.apply_b(&w), &phi);
        let rhs = dot(&w.to_stacked(), &op.apply_bt(&phi).to_stacked());
        prop_assert!((lhs - rhs).abs() <= 1e-12);
        prop_assert!(op.apply_b(&w).iter().sum::<f64>().abs() <= 1e-12);
    }

    #[test]
    fn solve_satisfies_its_constraints(seed in any::<u64>(), nx in 2usize..12, ny in 2usize..12) {
        let op = ConstraintOperator::build(&GridSpec::new(1.0, 0.8, nx, ny).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_vector_field(&mut rng, op.node_count());
        let m = op.solve_fp_linear(&w).unwrap();
        prop_assert!((op.integrate(&m) - 1.0).abs() <= 1e-12);
        prop_assert!(op.fp_residual(&m, &w) <= 1e-10);
    }
}
