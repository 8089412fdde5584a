use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use glevy_bench::{intensity, mixed, poisson};
use glevy_core::pide::solve_pide;
use glevy_core::sublinear::estimate_upper_expectation;
use glevy_core::*;

fn pide(c: &mut Criterion) {
    let mut g = c.benchmark_group("solve_pide");
    for nodes in [61, 121, 241] {
        let space = SpatialGrid::new(-1.5, 4.5, nodes).unwrap();
        let set = mixed();
        // keep σ²·dt/dx² fixed as the grid refines
        let steps = (nodes - 1) * (nodes - 1) / 8;
        g.bench_with_input(BenchmarkId::new("mixed", nodes), &space, |b, &space| {
            b.iter(|| {
                solve_pide(
                    &|x| x.min(2.0),
                    1.0,
                    space,
                    steps,
                    &set,
                    Convention::Terminal,
                )
                .unwrap()
                .origin_value()
            })
        });
    }
    g.finish();
}

fn monte_carlo(c: &mut Criterion) {
    let set = intensity();
    let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
    let controls = ControlPath::all_constants(&set);
    let xi = CylinderFunctional::terminal(1.0, |x| x.min(2.0), 4.0, 1.0).unwrap();
    c.bench_function("upper_expectation/intensity/10k", |b| {
        b.iter(|| {
            estimate_upper_expectation(&xi, &set, &controls, &grid, 10_000, black_box(7)).unwrap()
        })
    });
}

fn simulator(c: &mut Criterion) {
    let mut g = c.benchmark_group("simulate_path");
    for (name, set) in [("poisson", poisson()), ("mixed", mixed())] {
        let grid = TimeGrid::new(0.0, 1.0, 200).unwrap();
        let sim = Simulator::new(&set, grid).unwrap();
        let control = ControlPath::all_constants(&set).remove(0);
        let mut r = 0u64;
        g.bench_function(name, |b| {
            b.iter(|| {
                r += 1;
                sim.path(&control, 3, r).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, pide, monte_carlo, simulator);
criterion_main!(benches);
