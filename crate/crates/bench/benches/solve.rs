use criterion::{criterion_group, criterion_main, Criterion};
use mfg_core::coupling::CouplingSpec;
use mfg_core::discretization::{ConstraintOperator, DiscreteField, GridSpec};
use mfg_core::hamiltonian::{CosineField, HamiltonianModel};
use mfg_core::solver::{solve_p1, solve_p2, SolverParams};

fn solves(c: &mut Criterion) {
    let op = ConstraintOperator::build(&GridSpec::unit_square(17).unwrap());
    let h = HamiltonianModel::new(1.5, CosineField::constant(1.0), CosineField::new(0.0, 0.5, 0.25), [1.0, 1.0]).unwrap();
    let params = SolverParams::default();
    let mut group = c.benchmark_group("solve_17x17");
    group.sample_size(10);
    group.bench_function("p1_linear", |b| b.iter(|| solve_p1(&h, &CouplingSpec::power(1.0, 1.0), &op, &params).unwrap()));
    let kappa = DiscreteField::constant(op.node_count(), 1.05);
    group.bench_function("p2_congestion", |b| {
        b.iter(|| solve_p2(&h, &CouplingSpec::power(1.0, -1.0), &op, &kappa, &params).unwrap())
    });
    group.finish();
}

criterion_group!(benches, solves);
criterion_main!(benches);
