use thiserror::Error;

/// Errors raised by the numerical components.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid jump measure: {0}")]
    InvalidMeasure(String),

    #[error("invalid uncertainty set: {0}")]
    InvalidSet(String),

    #[error("invalid family descriptor: {0}")]
    InvalidFamily(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("time {time} is not a node of the grid")]
    OffGrid { time: f64 },

    #[error("control selected triple {index} but the uncertainty set has {len}")]
    ControlOutOfRange { index: usize, len: usize },

    #[error("monotonicity (CFL) bound violated: dt * rate = {ratio} > 1")]
    Cfl { ratio: f64 },

    #[error("payoff is not finite at x = {x}")]
    UnboundedPayoff { x: f64 },

    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("inner fixed-point loop did not converge at t = {t} (last change {change:e})")]
    NoConvergence { t: f64, change: f64 },

    #[error("coefficient evaluation failed: {0}")]
    Coefficient(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
