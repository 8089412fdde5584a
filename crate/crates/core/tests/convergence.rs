//! Observed orders under grid refinement.

use glevy_core::jumpdiff::{euler_sde, SdeSpec};
use glevy_core::pide::{solve_pide, SpatialGrid};
use glevy_core::stochint::{
    ito_formula_residual, ElementaryProcess, ItoLevyComponents, SimpleIntegrand, SquaredNorm,
    ValueShape,
};
use glevy_core::*;

fn order(coarse: f64, fine: f64) -> f64 {
    (coarse / fine).log2()
}

#[test]
fn pide_time_refinement() {
    let set = UncertaintySet::singleton(LevyTriple::scalar(
        JumpMeasure::scalar(&[(1.0, 1.0)]),
        0.0,
        0.0,
    ));
    let oracle = 2.0 - 3.0 * (-1.0f64).exp();
    let space = SpatialGrid::new(-1.5, 4.5, 121).unwrap();
    let err = |steps| {
        let u = solve_pide(
            &|x| x.min(2.0),
            1.0,
            space,
            steps,
            &set,
            Convention::Terminal,
        )
        .unwrap();
        (u.origin_value() - oracle).abs()
    };
    let (e1, e2, e3) = (err(100), err(200), err(400));
    assert!(order(e1, e2) >= 0.8, "{e1} {e2}");
    assert!(order(e2, e3) >= 0.8, "{e2} {e3}");
}

#[test]
fn euler_strong_order() {
    let set = UncertaintySet::singleton(LevyTriple::scalar(JumpMeasure::zero(1), 0.0, 0.0));
    let err = |steps| {
        let sim = Simulator::new(&set, TimeGrid::new(0.0, 1.0, steps).unwrap()).unwrap();
        let path = sim.path(&ControlPath::constant(0), 0, 0).unwrap();
        let y = euler_sde(&SdeSpec::linear(-1.0), &[1.0], &path).unwrap();
        (y.terminal()[0] - (-1.0f64).exp()).abs()
    };
    assert!(order(err(50), err(100)) >= 0.8);
}

fn rms_residual(comps: &ItoLevyComponents, steps: usize) -> f64 {
    let set = UncertaintySet::singleton(LevyTriple::scalar(JumpMeasure::zero(1), 0.0, 1.0));
    let sim = Simulator::new(&set, TimeGrid::new(0.0, 1.0, steps).unwrap()).unwrap();
    let sq: Vec<f64> = (0..100)
        .map(|seed| {
            let path = sim.path(&ControlPath::constant(0), seed, 0).unwrap();
            ito_formula_residual(&SquaredNorm, comps, &path)
                .unwrap()
                .powi(2)
        })
        .collect();
    (sq.iter().sum::<f64>() / sq.len() as f64).sqrt()
}

fn components(alpha: f64, beta: f64, z: f64) -> ItoLevyComponents {
    ItoLevyComponents {
        y0: vec![0.5],
        alpha: vec![
            ElementaryProcess::constant(1, ValueShape::Scalar, 0.0, 1.0, &[alpha]).unwrap(),
        ],
        beta: vec![ElementaryProcess::constant(1, ValueShape::Matrix, 0.0, 1.0, &[beta]).unwrap()],
        z: vec![ElementaryProcess::constant(1, ValueShape::Vector, 0.0, 1.0, &[z]).unwrap()],
        k: vec![SimpleIntegrand::zero(0.0, 1.0).unwrap()],
    }
}

#[test]
fn ito_residual_orders() {
    // Brownian integrand: the residual is Σ (ΔB² − Δt), of RMS √(2TΔt)
    let db = components(0.0, 0.0, 1.0);
    let (c, f) = (rms_residual(&db, 50), rms_residual(&db, 100));
    assert!(order(c, f) >= 0.4, "dB: {c} {f}");

    // ds and d<B> integrands: deterministic Riemann-sum error, first order
    for comps in [components(1.0, 0.0, 0.0), components(0.0, 1.0, 0.0)] {
        let (c, f) = (rms_residual(&comps, 50), rms_residual(&comps, 100));
        let ratio = f / c;
        assert!((ratio - 0.5).abs() <= 0.125, "ratio {ratio}");
    }
}
