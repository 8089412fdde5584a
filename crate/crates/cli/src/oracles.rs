//! Closed-form reference values.

use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(tag = "oracle", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OracleSpec {
    /// `E[min(N, cap)]`, `N ~ Poisson(rate·T)`.
    PoissonCapped { rate: f64, cap: f64, horizon: f64 },
    /// `E[N^power]`, `N ~ Poisson(rate·T)`.
    PoissonMoment { rate: f64, power: u32, horizon: f64 },
    /// `P(N = 0) = e^{-rate·T}`.
    PoissonSurvival { rate: f64, horizon: f64 },
    /// `e^{rate·T}`.
    Exponential { rate: f64, horizon: f64 },
    /// `1 - e^{-T/m}`.
    CloseJumpsBound { m: f64, horizon: f64 },
    /// `σ² T`.
    VolSquare { sigma: f64, horizon: f64 },
}

/// `E[g(N)]` for `N ~ Poisson(mean)` by summing the pmf far into the tail.
pub fn poisson_expectation(mean: f64, g: impl Fn(u64) -> f64) -> f64 {
    let last = (mean + 40.0 * mean.sqrt() + 60.0).ceil() as u64;
    let mut p = (-mean).exp();
    let mut sum = 0.0;
    for k in 0..=last {
        sum += p * g(k);
        p *= mean / (k + 1) as f64;
    }
    sum
}

impl OracleSpec {
    pub fn value(&self) -> f64 {
        match *self {
            OracleSpec::PoissonCapped { rate, cap, horizon } => {
                poisson_expectation(rate * horizon, |k| (k as f64).min(cap))
            }
            OracleSpec::PoissonMoment {
                rate,
                power,
                horizon,
            } => poisson_expectation(rate * horizon, |k| (k as f64).powi(power as i32)),
            OracleSpec::PoissonSurvival { rate, horizon } => (-rate * horizon).exp(),
            OracleSpec::Exponential { rate, horizon } => (rate * horizon).exp(),
            OracleSpec::CloseJumpsBound { m, horizon } => 1.0 - (-horizon / m).exp(),
            OracleSpec::VolSquare { sigma, horizon } => sigma * sigma * horizon,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capped_poisson() {
        let v = OracleSpec::PoissonCapped {
            rate: 1.0,
            cap: 2.0,
            horizon: 1.0,
        }
        .value();
        assert!((v - (2.0 - 3.0 * (-1.0f64).exp())).abs() < 1e-15);
        assert!((v - 0.896361676485673).abs() < 1e-14);
    }

    #[test]
    fn moments() {
        let m2 = OracleSpec::PoissonMoment {
            rate: 1.0,
            power: 2,
            horizon: 1.0,
        }
        .value();
        assert!((m2 - 2.0).abs() < 1e-13);
        let m1 = OracleSpec::PoissonMoment {
            rate: 3.0,
            power: 1,
            horizon: 2.0,
        }
        .value();
        assert!((m1 - 6.0).abs() < 1e-12);
    }

    #[test]
    fn bounds() {
        let b = OracleSpec::CloseJumpsBound {
            m: 4.0,
            horizon: 1.0,
        }
        .value();
        assert!((b - 0.221199216928595).abs() < 1e-14);
        let s = OracleSpec::PoissonSurvival {
            rate: 0.5,
            horizon: 1.0,
        }
        .value();
        assert!((s - 0.606530659712633).abs() < 1e-14);
    }
}
