use mfg_core::coupling::{check_admissibility, coupling_derivative, coupling_value, CouplingSpec};
use mfg_core::discretization::{ConstraintOperator, DiscreteField, GridSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn op(nodes: usize) -> ConstraintOperator {
    ConstraintOperator::build(&GridSpec::unit_square(nodes).unwrap())
}

fn families() -> Vec<CouplingSpec> {
    vec![
        CouplingSpec::Zero {},
        CouplingSpec::power(1.0, 1.0),
        CouplingSpec::power(2.5, 1.0),
        CouplingSpec::power(2.0, -1.0),
        CouplingSpec::GradientDependent { weight: 0.7, lipschitz_hint: None },
        CouplingSpec::NonlocalConvolution { radius: 0.15, a: 1.0, b: 0.3, tilt: [0.4, -0.2], lipschitz_hint: None },
    ]
}

fn random_density(rng: &mut ChaCha8Rng, n: usize) -> DiscreteField {
    DiscreteField((0..n).map(|_| rng.random_range(0.5..2.0)).collect())
}

#[test]
fn value_examples() {
    let op = op(9);
    let n = op.node_count();
    let one = DiscreteField::constant(n, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    assert_eq!(coupling_value(&CouplingSpec::Zero {}, &op, &random_density(&mut rng, n)).unwrap(), 0.0);
    assert!((coupling_value(&CouplingSpec::power(1.0, 1.0), &op, &one).unwrap() - 0.5).abs() < 1e-14);
    let dirichlet = CouplingSpec::GradientDependent { weight: 1.0, lipschitz_hint: None };
    assert!(coupling_value(&dirichlet, &op, &DiscreteField::constant(n, 3.7)).unwrap().abs() < 1e-14);
}

#[test]
fn derivative_examples() {
    let op = op(9);
    let n = op.node_count();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = random_density(&mut rng, n);
    assert!(coupling_derivative(&CouplingSpec::Zero {}, &op, &m).unwrap().iter().all(|v| *v == 0.0));
    let g = coupling_derivative(&CouplingSpec::power(1.0, 1.0), &op, &m).unwrap();
    assert!(g.iter().zip(m.iter()).all(|(a, b)| (a - b).abs() < 1e-15));
    let mut three = DiscreteField::constant(n, 1.0);
    three[7] = 3.0;
    let g = coupling_derivative(&CouplingSpec::power(2.0, 1.0), &op, &three).unwrap();
    assert!((g[7] - 9.0).abs() < 1e-14);
}

#[test]
fn derivative_matches_central_differences_at_second_order() {
    let op = op(13);
    let n = op.node_count();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for spec in families() {
        for _ in 0..20 {
            let m = random_density(&mut rng, n);
            let z: Vec<f64> = (0..n).map(|_| rng.random_range(-0.3..0.3)).collect();
            let g = coupling_derivative(&spec, &op, &m).unwrap();
            let exact = op.inner(&g, &z);
            let err = |h: f64| {
                let shift = |s: f64| DiscreteField(m.iter().zip(&z).map(|(a, b)| a + s * h * b).collect());
                let fd = (coupling_value(&spec, &op, &shift(1.0)).unwrap() - coupling_value(&spec, &op, &shift(-1.0)).unwrap())
                    / (2.0 * h);
                (fd - exact).abs()
            };
            let (e3, e4) = (err(1e-3), err(1e-4));
            // Quadratic functionals are reproduced exactly by central differences.
            if e3 > 1e-9 {
                let order = (e3 / e4).log10();
                assert!(order >= 1.9, "{spec:?}: errors {e3:e} {e4:e}");
            }
        }
    }
}

#[test]
fn convex_kinds_are_midpoint_convex() {
    let op = op(11);
    let n = op.node_count();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for spec in families().into_iter().filter(|s| !matches!(s, CouplingSpec::LocalPrimitive { sign, .. } if *sign < 0.0)) {
        for _ in 0..20 {
            let (a, b) = (random_density(&mut rng, n), random_density(&mut rng, n));
            let mid = DiscreteField(a.iter().zip(b.iter()).map(|(x, y)| 0.5 * (x + y)).collect());
            let f = |m: &DiscreteField| coupling_value(&spec, &op, m).unwrap();
            assert!(f(&mid) <= 0.5 * (f(&a) + f(&b)) + 1e-12, "{spec:?}");
        }
    }
}

#[test]
fn admissibility_examples() {
    let r = check_admissibility(&CouplingSpec::power(1.0, 1.0), 5.0).unwrap();
    assert_eq!(r.min_primitive, 0.0);
    assert!((r.max_abs_f - 5.0).abs() < 1e-12);
    assert!(r.monotone && r.global_lower_bound_plausible);

    let r = check_admissibility(&CouplingSpec::power(2.0, -1.0), 2.0).unwrap();
    assert!(!r.global_lower_bound_plausible && !r.monotone);
    assert!((r.min_primitive + 8.0 / 3.0).abs() < 1e-9);

    let r = check_admissibility(&CouplingSpec::Zero {}, 1.0).unwrap();
    assert_eq!((r.min_primitive, r.max_abs_f), (0.0, 0.0));
    assert!(r.monotone && r.global_lower_bound_plausible);
}

#[test]
fn invalid_specs_are_rejected() {
    let op = op(5);
    let m = DiscreteField::constant(op.node_count(), 1.0);
    assert!(coupling_value(&CouplingSpec::power(-1.0, 1.0), &op, &m).is_err());
    assert!(coupling_value(&CouplingSpec::power(1.0, 0.0), &op, &m).is_err());
    let bad = CouplingSpec::NonlocalConvolution { radius: 0.0, a: 1.0, b: 0.0, tilt: [0.0; 2], lipschitz_hint: None };
    assert!(coupling_value(&bad, &op, &m).is_err());
    assert!(check_admissibility(&CouplingSpec::power(1.0, 1.0), 0.0).is_err());
}

#[test]
fn config_schema_parses() {
    let spec: CouplingSpec = serde_json::from_str(r#"{"kind":"local_primitive","f":"pow","r":2.0,"sign":-1}"#).unwrap();
    assert_eq!(spec, CouplingSpec::power(2.0, -1.0));
    assert!(serde_json::from_str::<CouplingSpec>(r#"{"kind":"zero","r":1}"#).is_err());
}
