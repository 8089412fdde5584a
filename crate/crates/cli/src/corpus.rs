//! Random simple integrands for the continuity-bound check.

use glevy_core::batch::replicate_rng;
use glevy_core::stochint::{Kernel, SimpleIntegrand};
use glevy_core::{CylinderFunctional, Result, TimeGrid};
use rand::Rng;

/// Disjoint size windows that tents are placed in; none contains 0.
const SLOTS: [(f64, f64); 3] = [(-1.2, -0.2), (0.2, 1.4), (1.4, 2.6)];

/// The `index`-th integrand of the corpus drawn from `seed`, partitioned on
/// nodes of `grid`. Kernels are either one linear kernel or tents in distinct
/// slots; coefficients are constants or bounded functions of the path at the
/// left end of their interval.
pub fn random_integrand(seed: u64, index: u64, grid: &TimeGrid) -> Result<SimpleIntegrand> {
    let mut rng = replicate_rng(seed, index, 0);
    let steps = grid.steps();

    let pieces = rng.random_range(1..=3usize).min(steps);
    let mut cuts: Vec<usize> = Vec::with_capacity(pieces + 1);
    cuts.push(0);
    while cuts.len() < pieces {
        let c = rng.random_range(1..steps);
        if !cuts.contains(&c) {
            cuts.push(c);
        }
    }
    cuts.push(steps);
    cuts.sort_unstable();
    let partition: Vec<f64> = cuts.iter().map(|&k| grid.time(k)).collect();

    let kernels: Vec<Kernel> = if rng.random_bool(0.4) {
        vec![Kernel::linear(rng.random_range(-2.0..2.0))]
    } else {
        let chosen: Vec<_> = SLOTS.iter().filter(|_| rng.random_bool(0.6)).collect();
        let chosen = if chosen.is_empty() {
            vec![&SLOTS[1]]
        } else {
            chosen
        };
        chosen
            .into_iter()
            .map(|&(lo, hi)| {
                let height = rng.random_range(-2.0..2.0);
                Kernel::tent(0.5 * (lo + hi), 0.5 * (hi - lo), height)
            })
            .collect()
    };

    let mut coefficients = Vec::with_capacity(pieces);
    for &left in &partition[..pieces] {
        let row = (0..kernels.len())
            .map(|_| {
                let c: f64 = rng.random_range(-2.0..2.0);
                match rng.random_range(0..3u8) {
                    _ if left <= grid.t0() => Ok(CylinderFunctional::constant(c)),
                    0 => Ok(CylinderFunctional::constant(c)),
                    1 => CylinderFunctional::terminal(left, move |x| c * x.cos(), c.abs(), c.abs()),
                    _ => CylinderFunctional::terminal(
                        left,
                        move |x| c * x.clamp(-1.0, 1.0),
                        c.abs(),
                        c.abs(),
                    ),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        coefficients.push(row);
    }
    SimpleIntegrand::new(1, partition, kernels, coefficients)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_valid_and_reproducible() {
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        for i in 0..50 {
            let k = random_integrand(7, i, &grid).unwrap();
            assert!(k.support_overlaps(3.0).is_empty(), "integrand {i}");
            let again = random_integrand(7, i, &grid).unwrap();
            assert_eq!(k.partition(), again.partition());
        }
    }
}
