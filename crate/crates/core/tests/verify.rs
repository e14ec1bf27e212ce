use mfg_core::coupling::{Coupling, CouplingSpec};
use mfg_core::discretization::{ConstraintOperator, DiscreteField, GridSpec};
use mfg_core::hamiltonian::{CosineField, HamiltonianModel};
use mfg_core::solver::{solve_p1, SolverParams};
use mfg_core::verify::{certify, uniqueness_probe, Problem, ProblemContext};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn varying() -> HamiltonianModel {
    HamiltonianModel::new(1.5, CosineField::constant(1.0), CosineField::new(0.0, 0.5, 0.25), [1.0, 1.0]).unwrap()
}

#[test]
fn uniform_solution_has_vanishing_residuals() {
    let op = ConstraintOperator::build(&GridSpec::unit_square(33).unwrap());
    let h = HamiltonianModel::isotropic(1.5, [1.0, 1.0]).unwrap();
    let r = solve_p1(&h, &CouplingSpec::Zero {}, &op, &SolverParams::default()).unwrap();
    let res = &r.residuals;
    for v in [res.kkt_row1, res.fp_residual, res.mass_error, res.drift_residual, res.forward_fp_discrepancy.unwrap()] {
        assert!(v <= 1e-10, "{res:?}");
    }
    assert!((res.min_density - 1.0).abs() <= 1e-10);
}

#[test]
fn linear_coupling_certifies_with_the_apriori_bound() {
    let op = ConstraintOperator::build(&GridSpec::unit_square(33).unwrap());
    let h = varying();
    let spec = CouplingSpec::power(1.0, 1.0);
    let r = solve_p1(&h, &spec, &op, &SolverParams::default()).unwrap();
    assert!(r.converged);
    assert!(r.residuals.kkt_row1 <= 1e-5);
    let b = r.residuals.apriori_w_bound.unwrap();
    assert!(b.pass && b.lhs < b.rhs, "{b:?}");
    assert!(r.residuals.duality_gap.unwrap().abs() <= 1e-4);
}

#[test]
fn certify_recomputes_the_stored_report() {
    let op = ConstraintOperator::build(&GridSpec::unit_square(17).unwrap());
    let h = varying();
    let spec = CouplingSpec::power(1.0, 1.0);
    let r = solve_p1(&h, &spec, &op, &SolverParams::default()).unwrap();
    let c = Coupling::new(&spec, &op).unwrap();
    let ctx = ProblemContext { model: &h, coupling: &c, op: &op, kappa: None };
    assert_eq!(certify(&r, &ctx).unwrap(), r.residuals);
}

#[test]
fn corrupted_value_function_is_detected() {
    let op = ConstraintOperator::build(&GridSpec::unit_square(33).unwrap());
    let h = varying();
    let spec = CouplingSpec::power(1.0, 1.0);
    let mut r = solve_p1(&h, &spec, &op, &SolverParams::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    r.u.iter_mut().for_each(|v| *v += rng.random_range(-1e-2..1e-2));
    let c = Coupling::new(&spec, &op).unwrap();
    let ctx = ProblemContext { model: &h, coupling: &c, op: &op, kappa: None };
    let res = certify(&r, &ctx).unwrap();
    assert!(res.kkt_row1 > 1e-3, "{}", res.kkt_row1);
}

#[test]
fn strictly_convex_coupling_has_a_unique_solution() {
    let op = ConstraintOperator::build(&GridSpec::unit_square(17).unwrap());
    let h = varying();
    let spec = CouplingSpec::power(1.0, 1.0);
    let problem = Problem { model: &h, coupling: &spec, op: &op, kappa: None };
    let u = uniqueness_probe(&problem, &SolverParams::default(), 3, 0.5, 7).unwrap();
    assert!(u.all_converged);
    assert!(u.m_spread <= 1e-5 && u.u_spread <= 1e-5 && u.lambda_spread <= 1e-5, "{u:?}");
    assert_eq!(u.pass, Some(true));
}

#[test]
fn nonconvex_coupling_is_report_only() {
    let op = ConstraintOperator::build(&GridSpec::unit_square(9).unwrap());
    let h = varying();
    let spec = CouplingSpec::power(1.0, -1.0);
    let kappa = DiscreteField::constant(op.node_count(), 1.05);
    let problem = Problem { model: &h, coupling: &spec, op: &op, kappa: Some(&kappa) };
    let u = uniqueness_probe(&problem, &SolverParams::default(), 2, 0.5, 1).unwrap();
    assert_eq!(u.pass, None);
}
