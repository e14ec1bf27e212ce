use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mfg_core::discretization::{ConstraintOperator, DiscreteVectorField, GridSpec};
use mfg_core::hamiltonian::PointHamiltonian;
use mfg_core::kinetic::{project_onto_a, prox_bq};
use std::hint::black_box;

fn pointwise(c: &mut Criterion) {
    let h = PointHamiltonian::new(1.3, 0.2, 1.5);
    c.bench_function("project_onto_a", |b| b.iter(|| project_onto_a(&h, black_box(0.8), black_box([0.6, -1.1]))));
    c.bench_function("prox_bq", |b| b.iter(|| prox_bq(&h, black_box(0.5), black_box(0.9), black_box([0.4, 0.7]))));
}

fn operators(c: &mut Criterion) {
    let mut group = c.benchmark_group("operators");
    for nodes in [33, 65, 129] {
        let grid = GridSpec::unit_square(nodes).unwrap();
        group.bench_with_input(BenchmarkId::new("build", nodes), &grid, |b, g| b.iter(|| ConstraintOperator::build(g)));
        let op = ConstraintOperator::build(&grid);
        let w = DiscreteVectorField::from_fn(&grid, |x| [x[1] - 0.5, (3.0 * x[0]).sin()]);
        op.solve_fp_linear(&w).unwrap();
        group.bench_with_input(BenchmarkId::new("solve_fp_linear", nodes), &w, |b, w| b.iter(|| op.solve_fp_linear(w).unwrap()));
        let u: Vec<f64> = (0..op.node_count()).map(|k| (k as f64).sin()).collect();
        group.bench_with_input(BenchmarkId::new("apply_a", nodes), &u, |b, u| b.iter(|| op.apply_a(u)));
        group.bench_with_input(BenchmarkId::new("nodal_gradient", nodes), &u, |b, u| b.iter(|| op.nodal_gradient(u)));
    }
    group.finish();
}

criterion_group!(benches, pointwise, operators);
criterion_main!(benches);
