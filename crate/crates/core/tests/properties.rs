//! Randomized invariants of the measure, scheme and integral layers.

use glevy_core::pide::{solve_pide, SpatialGrid};
use glevy_core::stochint::{
    ito_formula_residual, ito_jump_integral, ElementaryProcess, ItoLevyComponents, Kernel,
    SimpleIntegrand, SineSum, SquaredNorm, ValueShape,
};
use glevy_core::sublinear::CylinderFunctional;
use glevy_core::uncertainty::build_transport_map;
use glevy_core::*;
use proptest::prelude::*;

fn atoms() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-3.0f64..3.0, 0.01f64..1.0), 1..5).prop_map(|mut v| {
        v.retain(|(z, _)| z.abs() > 1e-3);
        if v.is_empty() {
            v.push((1.0, 0.5));
        }
        let total: f64 = v.iter().map(|a| a.1).sum();
        if total > 1.0 {
            v.iter_mut().for_each(|a| a.1 /= total * 1.0001);
        }
        v
    })
}

fn pure_jump(atoms: &[(f64, f64)]) -> UncertaintySet {
    UncertaintySet::singleton(LevyTriple::scalar(JumpMeasure::scalar(atoms), 0.0, 0.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn transport_map_reproduces_weights(atoms in atoms()) {
        let v = JumpMeasure::scalar(&atoms);
        let g = build_transport_map(&v).unwrap();
        for (z, w) in &atoms {
            let mass = g.pushforward_mass(|y| (y[0] - z).abs() < 1e-12);
            let expected: f64 = atoms.iter().filter(|a| (a.0 - z).abs() < 1e-12).map(|a| a.1).sum();
            prop_assert!((mass - expected).abs() < 1e-12, "{mass} vs {expected} ({w})");
        }
        prop_assert!((g.residual_mass() - (1.0 - v.total_mass())).abs() < 1e-12);
    }

    #[test]
    fn scheme_is_monotone_and_preserves_constants(atoms in atoms(), c in -5.0f64..5.0, bump in 0.0f64..1.0) {
        let set = pure_jump(&atoms);
        let space = SpatialGrid::new(-4.0, 4.0, 81).unwrap();
        let flat = solve_pide(&|_| c, 0.5, space, 50, &set, Convention::Terminal).unwrap();
        prop_assert!(flat.level(0).iter().all(|&u| (u - c).abs() < 1e-12));

        let lo = solve_pide(&|x| x.sin(), 0.5, space, 50, &set, Convention::Terminal).unwrap();
        let hi = solve_pide(&|x| x.sin() + bump * (-x * x).exp(), 0.5, space, 50, &set, Convention::Terminal).unwrap();
        prop_assert!(lo.level(0).iter().zip(hi.level(0)).all(|(a, b)| a <= b));
    }

    #[test]
    fn scheme_is_subadditive(atoms in atoms(), other in atoms()) {
        let set = UncertaintySet::new(vec![
            LevyTriple::scalar(JumpMeasure::scalar(&atoms), 0.0, 0.3),
            LevyTriple::scalar(JumpMeasure::scalar(&other), 0.2, 0.0),
        ]);
        let space = SpatialGrid::new(-4.0, 4.0, 81).unwrap();
        let solve = |f: &dyn Fn(f64) -> f64| solve_pide(f, 0.5, space, 100, &set, Convention::Terminal).unwrap();
        let a = solve(&|x: f64| x.cos());
        let b = solve(&|x: f64| (x / 2.0).tanh());
        let ab = solve(&|x: f64| x.cos() + (x / 2.0).tanh());
        for j in 0..space.nodes() {
            prop_assert!(ab.level(0)[j] <= a.level(0)[j] + b.level(0)[j] + 1e-12);
        }
    }

    #[test]
    fn jump_integral_is_linear_and_additive(
        times in prop::collection::vec(0.01f64..0.99, 0..8),
        sizes in prop::collection::vec(-2.0f64..2.0, 8),
        a in -3.0f64..3.0,
        split in 0.1f64..0.9,
    ) {
        let mut times = times;
        times.sort_by(f64::total_cmp);
        let jumps: Vec<(f64, Vec<f64>)> = times.iter().zip(&sizes).map(|(&t, &z)| (t, vec![z])).collect();
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let path = ScenarioPath::from_jumps(grid, 1, &jumps).unwrap();

        let k1 = SimpleIntegrand::deterministic(0.0, 1.0, Kernel::linear(1.0)).unwrap();
        let k2 = SimpleIntegrand::deterministic(0.0, 1.0, Kernel::tent(1.5, 1.0, 2.0)).unwrap();
        let combo = k1.scaled(a).sum(&k2).unwrap();
        let i = |k: &SimpleIntegrand, s: f64, t: f64| ito_jump_integral(k, &path, s, t).unwrap();
        prop_assert!((i(&combo, 0.0, 1.0) - (a * i(&k1, 0.0, 1.0) + i(&k2, 0.0, 1.0))).abs() < 1e-12);
        prop_assert!((i(&k1, 0.0, split) + i(&k1, split, 1.0) - i(&k1, 0.0, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn pure_jump_ito_formula_is_exact(
        times in prop::collection::vec(0.01f64..0.99, 0..10),
        sizes in prop::collection::vec(-2.0f64..2.0, 10),
        y0 in -2.0f64..2.0,
    ) {
        let mut times = times;
        times.sort_by(f64::total_cmp);
        let jumps: Vec<(f64, Vec<f64>)> = times.iter().zip(&sizes).map(|(&t, &z)| (t, vec![z])).collect();
        let grid = TimeGrid::new(0.0, 1.0, 25).unwrap();
        let path = ScenarioPath::from_jumps(grid, 1, &jumps).unwrap();
        let comps = ItoLevyComponents {
            y0: vec![y0],
            alpha: vec![ElementaryProcess::zero(1, ValueShape::Scalar, 0.0, 1.0).unwrap()],
            beta: vec![ElementaryProcess::zero(1, ValueShape::Matrix, 0.0, 1.0).unwrap()],
            z: vec![ElementaryProcess::zero(1, ValueShape::Vector, 0.0, 1.0).unwrap()],
            k: vec![SimpleIntegrand::deterministic(0.0, 1.0, Kernel::linear(0.7)).unwrap()],
        };
        prop_assert!(ito_formula_residual(&SquaredNorm, &comps, &path).unwrap() < 1e-10);
        prop_assert!(ito_formula_residual(&SineSum, &comps, &path).unwrap() < 1e-10);
    }

    #[test]
    fn cylinder_scaling_is_exact(lambda in 0.0f64..10.0, x in -5.0f64..5.0) {
        let xi = CylinderFunctional::terminal(1.0, |x| x.min(2.0), 4.0, 1.0).unwrap();
        let scaled = xi.scaled(lambda);
        prop_assert_eq!(scaled.eval(&[x]), lambda * xi.eval(&[x]));
    }
}
