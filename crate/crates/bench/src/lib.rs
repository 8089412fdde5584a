//! Shared fixtures for the benchmarks.

use glevy_core::{JumpMeasure, LevyTriple, UncertaintySet};

/// Unit-intensity Poisson process.
pub fn poisson() -> UncertaintySet {
    UncertaintySet::singleton(LevyTriple::scalar(
        JumpMeasure::scalar(&[(1.0, 1.0)]),
        0.0,
        0.0,
    ))
}

/// Jump intensity uncertain between 0.5 and 1.
pub fn intensity() -> UncertaintySet {
    UncertaintySet::new(vec![
        LevyTriple::scalar(JumpMeasure::scalar(&[(1.0, 0.5)]), 0.0, 0.0),
        LevyTriple::scalar(JumpMeasure::scalar(&[(1.0, 1.0)]), 0.0, 0.0),
    ])
}

/// Jumps, drift and volatility all vary across the set.
pub fn mixed() -> UncertaintySet {
    UncertaintySet::new(vec![
        LevyTriple::scalar(JumpMeasure::scalar(&[(1.0, 0.4), (-0.5, 0.4)]), 0.0, 0.3),
        LevyTriple::scalar(JumpMeasure::scalar(&[(2.0, 0.3)]), 0.2, 0.5),
        LevyTriple::scalar(JumpMeasure::scalar(&[(0.7, 1.0)]), -0.1, 0.0),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_validate() {
        for set in [poisson(), intensity(), mixed()] {
            set.validated().unwrap();
        }
    }
}
