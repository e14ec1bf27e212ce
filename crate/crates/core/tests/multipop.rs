use mfg_core::discretization::{ConstraintOperator, DiscreteField, GridSpec};
use mfg_core::hamiltonian::{CosineField, HamiltonianModel};
use mfg_core::multipop::{solve_best_response, solve_potential, BestResponseParams, MultiPopSpec};
use mfg_core::solver::SolverParams;

fn sup(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |s, (x, y)| s.max((x - y).abs()))
}

fn model(c1: f64, c2: f64) -> HamiltonianModel {
    HamiltonianModel::new(1.5, CosineField::constant(1.0), CosineField::new(0.0, c1, c2), [1.0, 1.0]).unwrap()
}

#[test]
fn zero_interaction_gives_uniform_populations_after_one_sweep() {
    let op = ConstraintOperator::build(&GridSpec::unit_square(9).unwrap());
    let h = HamiltonianModel::isotropic(1.5, [1.0, 1.0]).unwrap();
    let spec = MultiPopSpec::new(vec![h.clone(), h], vec![vec![0.0; 2]; 2]).unwrap();
    let out = solve_best_response(&spec, &op, &SolverParams::default(), &BestResponseParams::default()).unwrap();
    assert!(out.converged);
    assert_eq!(out.outer_iterations, 1);
    assert!(out.history[0].change.iter().all(|c| *c <= 1e-12));
    for r in &out.populations {
        assert!(r.m.iter().all(|v| (v - 1.0).abs() <= 1e-12));
    }
}

#[test]
fn symmetric_pair_stays_on_the_diagonal() {
    let op = ConstraintOperator::build(&GridSpec::unit_square(17).unwrap());
    let h = model(0.5, 0.25);
    let spec = MultiPopSpec::new(vec![h.clone(), h], vec![vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
    let out = solve_best_response(&spec, &op, &SolverParams::default(), &BestResponseParams::default()).unwrap();
    assert!(out.converged, "{:?}", out.history.last());
    let (a, b) = (&out.populations[0], &out.populations[1]);
    assert!(sup(&a.m, &b.m) <= 1e-6);
    assert!(a.residuals.kkt_row1 <= 1e-5);
}

#[test]
fn potential_and_best_response_agree() {
    let op = ConstraintOperator::build(&GridSpec::unit_square(17).unwrap());
    let spec = MultiPopSpec::new(vec![model(0.5, 0.0), model(0.0, -0.4)], vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let params = SolverParams { tol_kkt: 1e-8, ..Default::default() };
    let br = solve_best_response(&spec, &op, &params, &BestResponseParams::default()).unwrap();
    let pot = solve_potential(&spec, &op, &params).unwrap();
    assert!(br.converged && pot.converged);
    for i in 0..2 {
        let d = sup(&br.populations[i].m, &pot.populations[i].m);
        assert!(d <= 1e-4, "population {i}: {d}");
    }
}

#[test]
fn coupled_potential_matches_best_response() {
    let op = ConstraintOperator::build(&GridSpec::unit_square(17).unwrap());
    let spec =
        MultiPopSpec::new(vec![model(0.5, 0.0), model(0.0, -0.4)], vec![vec![1.0, 0.5], vec![0.5, 1.0]]).unwrap();
    let params = SolverParams { tol_kkt: 1e-8, ..Default::default() };
    let br = solve_best_response(&spec, &op, &params, &BestResponseParams::default()).unwrap();
    let pot = solve_potential(&spec, &op, &params).unwrap();
    assert!(br.converged && pot.converged);
    for i in 0..2 {
        assert!(sup(&br.populations[i].m, &pot.populations[i].m) <= 1e-4);
        assert!(pot.populations[i].residuals.kkt_row1 <= 1e-5);
    }
}

#[test]
fn shared_cap_is_active_and_certified() {
    let op = ConstraintOperator::build(&GridSpec::unit_square(17).unwrap());
    let n = op.node_count();
    let spec = MultiPopSpec::new(vec![model(0.5, 0.25), model(0.5, -0.25)], vec![vec![1.0, 0.0], vec![0.0, 1.0]])
        .unwrap()
        .with_constraint(DiscreteField::constant(n, 2.1), vec![1.0, 1.0]);
    let free = MultiPopSpec { constraint: None, ..spec.clone() };
    let unconstrained = solve_potential(&free, &op, &SolverParams::default()).unwrap();
    let load_max = (0..n).map(|k| unconstrained.populations[0].m[k] + unconstrained.populations[1].m[k]).fold(0.0, f64::max);
    assert!(load_max > 2.1, "cap would be inactive: {load_max}");

    let out = solve_potential(&spec, &op, &SolverParams::default()).unwrap();
    assert!(out.converged);
    let shared = out.shared.as_ref().unwrap();
    assert!(shared.witness.unwrap().pass);
    assert!(shared.active_nodes > 0);
    assert!(shared.min_p >= -1e-10);
    assert!(shared.complementarity <= 1e-6);
    assert!(shared.support_violation <= 1e-5);
    assert!(shared.bound_violation <= 1e-5);
    for r in &out.populations {
        assert!(r.residuals.kkt_row1 <= 1e-5);
        assert!(r.residuals.min_density >= 1e-8);
    }
}

#[test]
fn infeasible_weights_are_rejected() {
    let op = ConstraintOperator::build(&GridSpec::unit_square(5).unwrap());
    let h = HamiltonianModel::isotropic(1.5, [1.0, 1.0]).unwrap();
    let spec = MultiPopSpec::new(vec![h.clone(), h], vec![vec![1.0, 0.0], vec![0.0, 1.0]])
        .unwrap()
        .with_constraint(DiscreteField::constant(op.node_count(), 1.0), vec![0.6, 0.6]);
    assert!(solve_potential(&spec, &op, &SolverParams::default()).is_err());
}

#[test]
fn best_response_is_deterministic() {
    let op = ConstraintOperator::build(&GridSpec::unit_square(9).unwrap());
    let spec = MultiPopSpec::new(vec![model(0.5, 0.0), model(0.0, 0.5)], vec![vec![1.0, 0.3], vec![0.6, 1.0]]).unwrap();
    let a = solve_best_response(&spec, &op, &SolverParams::default(), &BestResponseParams::default()).unwrap();
    let b = solve_best_response(&spec, &op, &SolverParams::default(), &BestResponseParams::default()).unwrap();
    for i in 0..2 {
        assert_eq!(a.populations[i].m.0, b.populations[i].m.0);
        assert_eq!(a.populations[i].u.0, b.populations[i].u.0);
    }
}
