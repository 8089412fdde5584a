//! The sublinear expectation as an upper expectation over control families,
//! the backward cylinder recursion, conditional expectations, capacities and
//! the axiom checks.
//!
//! Monte Carlo estimates take the maximum over a finite control family of
//! sample means computed with common random numbers: every control sees the
//! same Poisson clock, marks and Brownian increments for a given replicate.
//! The result is a lower bound for the true supremum.

use std::fmt;
use std::sync::Arc;

use crate::batch::{map_replicates, require_samples, SampleStats};
use crate::error::{Error, Result};
use crate::pide::{propagate, PideConfig, SpatialGrid};
use crate::scenario::{ControlPath, ScenarioPath, Simulator, TimeGrid};
use crate::uncertainty::UncertaintySet;

/// Function of the stacked increments `(x_1, ..., x_n)`, each in `R^d`.
pub type Phi = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// `ξ = φ(X_{t1}, X_{t2} - X_{t1}, ..., X_{tn} - X_{t(n-1)})`.
///
/// Times are measured from the start of the scenario, whose value is 0.
#[derive(Clone)]
pub struct CylinderFunctional {
    dim: usize,
    times: Vec<f64>,
    phi: Phi,
    bound: f64,
    lipschitz: f64,
}

impl fmt::Debug for CylinderFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CylinderFunctional")
            .field("dim", &self.dim)
            .field("times", &self.times)
            .field("bound", &self.bound)
            .field("lipschitz", &self.lipschitz)
            .finish_non_exhaustive()
    }
}

impl CylinderFunctional {
    pub fn new(
        dim: usize,
        times: Vec<f64>,
        phi: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        bound: f64,
        lipschitz: f64,
    ) -> Result<Self> {
        Self::from_arc(dim, times, Arc::new(phi), bound, lipschitz)
    }

    pub fn from_arc(
        dim: usize,
        times: Vec<f64>,
        phi: Phi,
        bound: f64,
        lipschitz: f64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "cylinder dimension must be positive".into(),
            ));
        }
        if times.first().is_some_and(|&t| t < 0.0) || times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "cylinder times must be nonnegative and increasing: {times:?}"
            )));
        }
        if bound < 0.0 || lipschitz < 0.0 {
            return Err(Error::InvalidArgument(
                "bound and Lipschitz constant must be nonnegative".into(),
            ));
        }
        Ok(Self {
            dim,
            times,
            phi,
            bound,
            lipschitz,
        })
    }

    /// Scalar payoff of `X_t`.
    pub fn terminal(
        t: f64,
        payoff: impl Fn(f64) -> f64 + Send + Sync + 'static,
        bound: f64,
        lipschitz: f64,
    ) -> Result<Self> {
        Self::new(1, vec![t], move |x| payoff(x[0]), bound, lipschitz)
    }

    /// The constant random variable `c` (no observation times).
    pub fn constant(c: f64) -> Self {
        Self {
            dim: 1,
            times: Vec::new(),
            phi: Arc::new(move |_| c),
            bound: c.abs(),
            lipschitz: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn arity(&self) -> usize {
        self.times.len()
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn phi(&self) -> &Phi {
        &self.phi
    }

    pub fn eval(&self, increments: &[f64]) -> f64 {
        (self.phi)(increments)
    }

    /// `λ ξ`.
    pub fn scaled(&self, lambda: f64) -> Self {
        let phi = self.phi.clone();
        Self {
            dim: self.dim,
            times: self.times.clone(),
            phi: Arc::new(move |x| lambda * phi(x)),
            bound: self.bound * lambda.abs(),
            lipschitz: self.lipschitz * lambda.abs(),
        }
    }

    /// Stacked increments read from `path` at the cylinder times.
    pub fn increments(&self, path: &ScenarioPath) -> Result<Vec<f64>> {
        let d = self.dim;
        if path.dim() != d {
            return Err(Error::InvalidArgument(format!(
                "functional of dimension {d} evaluated on a path of dimension {}",
                path.dim()
            )));
        }
        let mut out = Vec::with_capacity(d * self.times.len());
        let mut prev = vec![0.0; d];
        for &t in &self.times {
            let v = path.value_at(t)?;
            out.extend(v.iter().zip(&prev).map(|(a, b)| a - b));
            prev.copy_from_slice(v);
        }
        Ok(out)
    }

    pub fn eval_path(&self, path: &ScenarioPath) -> Result<f64> {
        Ok(self.eval(&self.increments(path)?))
    }

    /// Checks the declared bound and Lipschitz constant on sample points
    /// (stacked increments); returns one message per breach.
    pub fn check_sampled(&self, points: &[Vec<f64>]) -> Vec<String> {
        let mut out = Vec::new();
        let vals: Vec<f64> = points.iter().map(|p| self.eval(p)).collect();
        for (p, v) in points.iter().zip(&vals) {
            if !(v.abs() <= self.bound * (1.0 + 1e-12)) {
                out.push(format!(
                    "|φ({p:?})| = {} exceeds bound {}",
                    v.abs(),
                    self.bound
                ));
            }
        }
        for i in 0..points.len() {
            for j in i + 1..points.len() {
                let dist: f64 = points[i]
                    .iter()
                    .zip(&points[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                let diff = (vals[i] - vals[j]).abs();
                if diff > self.lipschitz * dist * (1.0 + 1e-9) + 1e-12 {
                    out.push(format!(
                        "Lipschitz breach between samples {i} and {j}: {diff} > {} * {dist}",
                        self.lipschitz
                    ));
                }
            }
        }
        out
    }
}

/// Upper-expectation estimate over a control family.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: usize,
    pub argmax_control: usize,
    pub control_label: String,
    pub seed: u64,
    /// Statistics of every control, in family order.
    pub per_control: Vec<SampleStats>,
}

impl Estimate {
    /// Picks the control with the largest mean (lowest index on ties).
    pub fn from_controls(per_control: Vec<SampleStats>, labels: &[&str], seed: u64) -> Self {
        let mut best = 0;
        for (i, s) in per_control.iter().enumerate() {
            if s.mean > per_control[best].mean {
                best = i;
            }
        }
        let b = per_control[best];
        Self {
            value: b.mean,
            std_error: b.std_error,
            samples: b.samples,
            argmax_control: best,
            control_label: labels[best].to_string(),
            seed,
            per_control,
        }
    }
}

/// Monte Carlo driver with common random numbers across controls.
pub struct MonteCarlo<'a> {
    sim: Simulator<'a>,
    samples: usize,
    seed: u64,
}

impl<'a> MonteCarlo<'a> {
    pub fn new(set: &'a UncertaintySet, grid: TimeGrid, samples: usize, seed: u64) -> Result<Self> {
        require_samples(samples)?;
        Ok(Self {
            sim: Simulator::new(set, grid)?,
            samples,
            seed,
        })
    }

    pub fn simulator(&self) -> &Simulator<'a> {
        &self.sim
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `width` sample columns under `control`, one entry per replicate.
    pub fn columns<F>(&self, control: &ControlPath, width: usize, f: F) -> Result<Vec<Vec<f64>>>
    where
        F: Fn(&ScenarioPath, &mut [f64]) -> Result<()> + Sync + Send,
    {
        control.check(self.sim.set(), self.sim.grid())?;
        let rows = map_replicates(self.samples, |r| {
            let path = self.sim.path(control, self.seed, r)?;
            let mut row = vec![0.0; width];
            f(&path, &mut row)?;
            Ok(row)
        })?;
        Ok(transpose(&rows, width))
    }

    /// Upper expectation of the path functional `f` over `controls`.
    pub fn upper<F>(&self, controls: &[ControlPath], f: F) -> Result<Estimate>
    where
        F: Fn(&ScenarioPath) -> Result<f64> + Sync + Send,
    {
        if controls.is_empty() {
            return Err(Error::InvalidArgument("control family is empty".into()));
        }
        let mut stats = Vec::with_capacity(controls.len());
        for c in controls {
            let col = self.columns(c, 1, |p, out| {
                out[0] = f(p)?;
                Ok(())
            })?;
            stats.push(SampleStats::from_samples(&col[0]));
        }
        let labels: Vec<&str> = controls.iter().map(ControlPath::label).collect();
        Ok(Estimate::from_controls(stats, &labels, self.seed))
    }
}

pub(crate) fn transpose(rows: &[Vec<f64>], width: usize) -> Vec<Vec<f64>> {
    (0..width)
        .map(|c| rows.iter().map(|r| r[c]).collect())
        .collect()
}

/// `max_θ` of the `n`-sample mean of `ξ` along `B^{0,θ}`.
pub fn estimate_upper_expectation(
    xi: &CylinderFunctional,
    set: &UncertaintySet,
    controls: &[ControlPath],
    grid: &TimeGrid,
    n: usize,
    seed: u64,
) -> Result<Estimate> {
    for &t in xi.times() {
        grid.node_index(t)?;
    }
    let mc = MonteCarlo::new(set, *grid, n, seed)?;
    mc.upper(controls, |p| xi.eval_path(p))
}

/// Piecewise-multilinear function on a tensor product of one spatial grid,
/// extended by constants outside it.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedFunction {
    grid: SpatialGrid,
    arity: usize,
    values: Vec<f64>,
}

impl TabulatedFunction {
    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let n = self.grid.nodes();
        let mut acc = 0.0;
        let locs: Vec<(usize, f64)> = x[..self.arity]
            .iter()
            .map(|&v| self.grid.locate(v))
            .collect();
        for corner in 0..(1usize << self.arity) {
            let mut w = 1.0;
            let mut idx = 0;
            for (a, &(i, frac)) in locs.iter().enumerate() {
                let hi = corner >> (self.arity - 1 - a) & 1 == 1;
                let (node, wt) = if hi {
                    ((i + 1).min(n - 1), frac)
                } else {
                    (i, 1.0 - frac)
                };
                w *= wt;
                idx = idx * n + node;
            }
            if w != 0.0 {
                acc += w * self.values[idx];
            }
        }
        acc
    }
}

/// Result of conditioning a cylinder functional at one of its own times.
#[derive(Debug, Clone)]
pub enum ConditionalExpectation {
    /// Conditioning at the last time: `φ` itself.
    Functional(CylinderFunctional),
    /// Intermediate time: tabulated `φ_{n-i}`.
    Table(TabulatedFunction),
    /// Conditioning at time 0: the full expectation.
    Constant(f64),
}

impl ConditionalExpectation {
    /// Number of observed increments the function takes.
    pub fn arity(&self) -> usize {
        match self {
            Self::Functional(f) => f.arity(),
            Self::Table(t) => t.arity(),
            Self::Constant(_) => 0,
        }
    }

    pub fn eval(&self, increments: &[f64]) -> f64 {
        match self {
            Self::Functional(f) => f.eval(increments),
            Self::Table(t) => t.eval(increments),
            Self::Constant(c) => *c,
        }
    }

    /// Views the conditional expectation as a cylinder functional observed at `times`.
    pub fn into_functional(
        self,
        times: Vec<f64>,
        bound: f64,
        lipschitz: f64,
    ) -> Result<CylinderFunctional> {
        if times.len() != self.arity() {
            return Err(Error::InvalidArgument(format!(
                "{} times given for a function of {} increments",
                times.len(),
                self.arity()
            )));
        }
        match self {
            Self::Functional(f) => Ok(f),
            Self::Constant(c) => Ok(CylinderFunctional::constant(c)),
            Self::Table(t) => {
                CylinderFunctional::new(1, times, move |x| t.eval(x), bound, lipschitz)
            }
        }
    }
}

/// Maximum number of observation times accepted by the grid recursion.
pub const MAX_CYLINDER_TIMES: usize = 3;

fn recursion_guard(xi: &CylinderFunctional) -> Result<()> {
    if xi.dim() != 1 {
        return Err(Error::Unsupported(format!(
            "cylinder recursion is one-dimensional, got d = {}",
            xi.dim()
        )));
    }
    if xi.arity() > MAX_CYLINDER_TIMES {
        return Err(Error::Unsupported(format!(
            "cylinder recursion supports at most {MAX_CYLINDER_TIMES} times, got {}",
            xi.arity()
        )));
    }
    Ok(())
}

/// Runs the backward recursion from `φ_0 = φ` down to the function of
/// `keep` increments.
fn backward_recursion(
    xi: &CylinderFunctional,
    keep: usize,
    set: &UncertaintySet,
    cfg: &PideConfig,
) -> Result<TabulatedFunction> {
    let grid = cfg.space;
    let n = grid.nodes();
    let times = xi.times();
    let mut current: Phi = xi.phi().clone();
    let mut table = None;
    for j in (keep + 1..=times.len()).rev() {
        let start = if j >= 2 { times[j - 2] } else { 0.0 };
        let duration = times[j - 1] - start;
        let arity = j - 1;
        let count = n.pow(arity as u32);
        let mut values = vec![0.0; count];
        let mut args = vec![0.0; j];
        for (flat, slot) in values.iter_mut().enumerate() {
            let mut rem = flat;
            for a in (0..arity).rev() {
                args[a] = grid.x(rem % n);
                rem /= n;
            }
            if duration <= 0.0 {
                args[arity] = 0.0;
                *slot = current(&args);
                continue;
            }
            let init: Vec<f64> = (0..n)
                .map(|m| {
                    args[arity] = grid.x(m);
                    current(&args)
                })
                .collect();
            let u = propagate(&init, duration, set, cfg)?;
            *slot = grid.interpolate(&u, 0.0);
        }
        let t = TabulatedFunction {
            grid,
            arity,
            values,
        };
        let shared = Arc::new(t.clone());
        current = Arc::new(move |x| shared.eval(x));
        table = Some(t);
    }
    Ok(table.unwrap_or_else(|| {
        // keep == arity: nothing to integrate, tabulate φ for uniformity
        let arity = times.len();
        let count = n.pow(arity as u32);
        let mut args = vec![0.0; arity];
        let values = (0..count)
            .map(|flat| {
                let mut rem = flat;
                for a in (0..arity).rev() {
                    args[a] = grid.x(rem % n);
                    rem /= n;
                }
                xi.eval(&args)
            })
            .collect();
        TabulatedFunction {
            grid,
            arity,
            values,
        }
    }))
}

/// `Ê[ξ]` by the iterated PIDE construction (d = 1, at most three times).
pub fn evaluate_cylinder(
    xi: &CylinderFunctional,
    set: &UncertaintySet,
    cfg: &PideConfig,
) -> Result<f64> {
    if xi.arity() == 0 {
        return Ok(xi.eval(&[]));
    }
    recursion_guard(xi)?;
    let t = backward_recursion(xi, 0, set, cfg)?;
    Ok(t.eval(&[]))
}

/// `Ê[ξ | Ω_t]` for `t` equal to 0 or one of the cylinder times, as a
/// function of the increments observed up to `t`.
pub fn conditional_expectation(
    xi: &CylinderFunctional,
    t: f64,
    set: &UncertaintySet,
    cfg: &PideConfig,
) -> Result<ConditionalExpectation> {
    let times = xi.times();
    let keep = if let Some(i) = times.iter().position(|&s| (s - t).abs() <= 1e-12) {
        i + 1
    } else if t == 0.0 {
        0
    } else {
        return Err(Error::InvalidArgument(format!(
            "conditioning time {t} is not among the cylinder times {times:?}"
        )));
    };
    if keep == times.len() {
        return Ok(ConditionalExpectation::Functional(xi.clone()));
    }
    recursion_guard(xi)?;
    let table = backward_recursion(xi, keep, set, cfg)?;
    if keep == 0 {
        Ok(ConditionalExpectation::Constant(table.eval(&[])))
    } else {
        Ok(ConditionalExpectation::Table(table))
    }
}

/// Path-measurable event.
#[derive(Clone)]
pub struct EventPredicate {
    label: String,
    test: Arc<dyn Fn(&ScenarioPath) -> bool + Send + Sync>,
}

impl fmt::Debug for EventPredicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EventPredicate")
            .field("label", &self.label)
            .finish_non_exhaustive()
    }
}

impl EventPredicate {
    pub fn new(
        label: impl Into<String>,
        test: impl Fn(&ScenarioPath) -> bool + Send + Sync + 'static,
    ) -> Self {
        Self {
            label: label.into(),
            test: Arc::new(test),
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn holds(&self, path: &ScenarioPath) -> bool {
        (self.test)(path)
    }

    /// No jump in `(t0, until]`.
    pub fn no_jump_until(until: f64) -> Self {
        Self::new(format!("no jump by {until}"), move |p| {
            p.jumps().iter().all(|j| j.time > until)
        })
    }

    /// At least two jumps strictly closer than `gap`.
    pub fn jumps_within(gap: f64) -> Self {
        Self::new(format!("two jumps within {gap}"), move |p| {
            p.jumps().windows(2).any(|w| w[1].time - w[0].time < gap)
        })
    }

    /// At least `count` jumps on the whole horizon.
    pub fn at_least_jumps(count: usize) -> Self {
        Self::new(format!("at least {count} jumps"), move |p| {
            p.jumps().len() >= count
        })
    }

    /// Infinitely many jumps; polar because every ledger is finite.
    pub fn infinitely_many_jumps() -> Self {
        Self::new("infinitely many jumps", |p| p.jumps().len() == usize::MAX)
    }

    pub fn never() -> Self {
        Self::new("never", |_| false)
    }
}

/// `c(A) = max_θ P^θ(A)` with a binomial standard error.
pub fn estimate_capacity(
    event: &EventPredicate,
    set: &UncertaintySet,
    controls: &[ControlPath],
    grid: &TimeGrid,
    n: usize,
    seed: u64,
) -> Result<Estimate> {
    let mc = MonteCarlo::new(set, *grid, n, seed)?;
    let mut est = mc.upper(controls, |p| Ok(if event.holds(p) { 1.0 } else { 0.0 }))?;
    let binomial = |s: &mut SampleStats| {
        let p = s.mean;
        s.std_error = (p * (1.0 - p) / s.samples as f64).sqrt();
    };
    est.per_control.iter_mut().for_each(binomial);
    est.std_error = est.per_control[est.argmax_control].std_error;
    Ok(est)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxiomStatus {
    Pass,
    Fail,
    /// Premise not met (e.g. neither operand dominates the other).
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AxiomOutcome {
    pub status: AxiomStatus,
    pub lhs: f64,
    pub rhs: f64,
    pub tolerance: f64,
}

impl AxiomOutcome {
    fn leq(lhs: f64, rhs: f64, tolerance: f64) -> Self {
        let status = if lhs <= rhs + tolerance {
            AxiomStatus::Pass
        } else {
            AxiomStatus::Fail
        };
        Self {
            status,
            lhs,
            rhs,
            tolerance,
        }
    }

    fn na() -> Self {
        Self {
            status: AxiomStatus::NotApplicable,
            lhs: f64::NAN,
            rhs: f64::NAN,
            tolerance: 0.0,
        }
    }

    pub fn failed(&self) -> bool {
        self.status == AxiomStatus::Fail
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairAxioms {
    pub pair: usize,
    pub monotonicity: AxiomOutcome,
    pub constant_preserving: AxiomOutcome,
    pub subadditivity: AxiomOutcome,
    pub homogeneity: AxiomOutcome,
}

impl PairAxioms {
    pub fn outcomes(&self) -> [(&'static str, &AxiomOutcome); 4] {
        [
            ("monotonicity", &self.monotonicity),
            ("constant-preserving", &self.constant_preserving),
            ("sub-additivity", &self.subadditivity),
            ("positive-homogeneity", &self.homogeneity),
        ]
    }

    pub fn passed(&self) -> bool {
        self.outcomes().iter().all(|(_, o)| !o.failed())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AxiomReport {
    pub lambda: f64,
    pub pairs: Vec<PairAxioms>,
}

impl AxiomReport {
    /// `(pair, axiom)` for every failed check.
    pub fn failures(&self) -> Vec<(usize, &'static str)> {
        self.pairs
            .iter()
            .flat_map(|p| {
                p.outcomes()
                    .into_iter()
                    .filter(|(_, o)| o.failed())
                    .map(move |(name, _)| (p.pair, name))
            })
            .collect()
    }
}

/// Deterministic tolerance for exact identities.
pub const EXACT_TOLERANCE: f64 = 1e-12;

/// Checks the four sublinear-expectation axioms on each pair with shared
/// random numbers. All functionals are evaluated on one simulation pass.
pub fn axiom_check(
    pairs: &[(CylinderFunctional, CylinderFunctional)],
    lambda: f64,
    set: &UncertaintySet,
    controls: &[ControlPath],
    grid: &TimeGrid,
    n: usize,
    seed: u64,
) -> Result<AxiomReport> {
    if lambda < 0.0 {
        return Err(Error::InvalidArgument("homogeneity needs λ >= 0".into()));
    }
    if controls.is_empty() {
        return Err(Error::InvalidArgument("control family is empty".into()));
    }
    let mc = MonteCarlo::new(set, *grid, n, seed)?;
    let width = 2 * pairs.len();
    // columns[control][functional][replicate]
    let mut columns = Vec::with_capacity(controls.len());
    for c in controls {
        columns.push(mc.columns(c, width, |p, out| {
            for (i, (x, y)) in pairs.iter().enumerate() {
                out[2 * i] = x.eval_path(p)?;
                out[2 * i + 1] = y.eval_path(p)?;
            }
            Ok(())
        })?);
    }
    let labels: Vec<&str> = controls.iter().map(ControlPath::label).collect();
    let upper = |make: &dyn Fn(&[Vec<f64>]) -> Vec<f64>| {
        let stats = columns
            .iter()
            .map(|cols| SampleStats::from_samples(&make(cols)))
            .collect();
        Estimate::from_controls(stats, &labels, seed)
    };

    let mut out = Vec::with_capacity(pairs.len());
    for i in 0..pairs.len() {
        let (xi, yi) = (2 * i, 2 * i + 1);
        let ex = upper(&|c| c[xi].clone());
        let ey = upper(&|c| c[yi].clone());
        let exy = upper(&|c| c[xi].iter().zip(&c[yi]).map(|(a, b)| a - b).collect());
        let elx = upper(&|c| c[xi].iter().map(|a| lambda * a).collect());

        let x_ge_y = columns
            .iter()
            .all(|c| c[xi].iter().zip(&c[yi]).all(|(a, b)| a >= b));
        let y_ge_x = columns
            .iter()
            .all(|c| c[xi].iter().zip(&c[yi]).all(|(a, b)| b >= a));
        let monotonicity = if x_ge_y {
            AxiomOutcome::leq(ey.value, ex.value, 0.0)
        } else if y_ge_x {
            AxiomOutcome::leq(ex.value, ey.value, 0.0)
        } else {
            AxiomOutcome::na()
        };

        // Ê[c] = c for the constants c = Ê[X], Ê[Y], and for X itself when it
        // is constant on every sample.
        let mut worst: f64 = 0.0;
        for c in [ex.value, ey.value] {
            let col = vec![c; n];
            let e = upper(&|_| col.clone());
            worst = worst.max((e.value - c).abs());
        }
        let lo = columns
            .iter()
            .flat_map(|c| c[xi].iter())
            .copied()
            .fold(f64::INFINITY, f64::min);
        let hi = columns
            .iter()
            .flat_map(|c| c[xi].iter())
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if lo == hi {
            worst = worst.max((ex.value - lo).abs());
        }
        let constant_preserving = AxiomOutcome::leq(worst, 0.0, 0.0);

        let combined = (ex.std_error.powi(2) + ey.std_error.powi(2) + exy.std_error.powi(2)).sqrt();
        let subadditivity = AxiomOutcome::leq(ex.value - ey.value, exy.value, 3.0 * combined);

        let target = lambda * ex.value;
        let homogeneity = AxiomOutcome::leq(
            (elx.value - target).abs(),
            0.0,
            EXACT_TOLERANCE * target.abs().max(1.0),
        );

        out.push(PairAxioms {
            pair: i,
            monotonicity,
            constant_preserving,
            subadditivity,
            homogeneity,
        });
    }
    Ok(AxiomReport { lambda, pairs: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uncertainty::{JumpMeasure, LevyTriple};

    fn poisson_family() -> UncertaintySet {
        UncertaintySet::new(vec![
            LevyTriple::scalar(JumpMeasure::scalar(&[(1.0, 0.5)]), 0.0, 0.0),
            LevyTriple::scalar(JumpMeasure::scalar(&[(1.0, 1.0)]), 0.0, 0.0),
        ])
    }

    #[test]
    fn constant_is_exact() {
        let set = poisson_family();
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let xi = CylinderFunctional::constant(0.7);
        let e =
            estimate_upper_expectation(&xi, &set, &ControlPath::all_constants(&set), &grid, 500, 1)
                .unwrap();
        assert_eq!(e.value, 0.7);
        assert_eq!(e.std_error, 0.0);
    }

    #[test]
    fn errors_on_small_samples_and_off_grid_times() {
        let set = poisson_family();
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let c = ControlPath::all_constants(&set);
        let xi = CylinderFunctional::terminal(1.0, |x| x, 10.0, 1.0).unwrap();
        assert!(matches!(
            estimate_upper_expectation(&xi, &set, &c, &grid, 1, 0),
            Err(Error::TooFewSamples(1))
        ));
        let off = CylinderFunctional::terminal(0.55, |x| x, 10.0, 1.0).unwrap();
        assert!(matches!(
            estimate_upper_expectation(&off, &set, &c, &grid, 10, 0),
            Err(Error::OffGrid { .. })
        ));
    }

    #[test]
    fn increments_are_stacked_differences() {
        let set = poisson_family();
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let sim = Simulator::new(&set, grid).unwrap();
        let p = sim.path(&ControlPath::constant(1), 4, 2).unwrap();
        let xi = CylinderFunctional::new(1, vec![0.3, 1.0], |x| x[0] + x[1], 10.0, 2.0).unwrap();
        let inc = xi.increments(&p).unwrap();
        assert_eq!(inc[0], p.value_at(0.3).unwrap()[0]);
        assert_eq!(xi.eval(&inc), p.terminal()[0]);
    }

    #[test]
    fn never_event_has_zero_capacity() {
        let set = poisson_family();
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let c = ControlPath::all_constants(&set);
        for ev in [
            EventPredicate::never(),
            EventPredicate::infinitely_many_jumps(),
        ] {
            let e = estimate_capacity(&ev, &set, &c, &grid, 200, 3).unwrap();
            assert_eq!(e.value, 0.0);
            assert_eq!(e.std_error, 0.0);
        }
    }

    #[test]
    fn tabulated_interpolates_linearly() {
        let grid = SpatialGrid::new(-1.0, 1.0, 3).unwrap();
        let t = TabulatedFunction {
            grid,
            arity: 2,
            values: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
        };
        // f(a, b) = 3 * idx(a) + idx(b) is affine in (a, b)
        assert!((t.eval(&[0.5, -0.5]) - (3.0 * 1.5 + 0.5)).abs() < 1e-12);
        assert_eq!(t.eval(&[5.0, 5.0]), 8.0);
    }

    #[test]
    fn conditional_rejects_foreign_times() {
        let set = poisson_family();
        let cfg = PideConfig::new(SpatialGrid::new(-2.0, 4.0, 61).unwrap(), 0.05);
        let xi = CylinderFunctional::terminal(1.0, |x| x.min(2.0), 4.0, 1.0).unwrap();
        assert!(conditional_expectation(&xi, 0.5, &set, &cfg).is_err());
        let same = conditional_expectation(&xi, 1.0, &set, &cfg).unwrap();
        assert!(matches!(same, ConditionalExpectation::Functional(_)));
    }

    #[test]
    fn recursion_guards() {
        let set = poisson_family();
        let cfg = PideConfig::new(SpatialGrid::new(-2.0, 4.0, 61).unwrap(), 0.05);
        let xi = CylinderFunctional::new(1, vec![0.1, 0.2, 0.3, 0.4], |x| x[3], 1.0, 1.0).unwrap();
        assert!(matches!(
            evaluate_cylinder(&xi, &set, &cfg),
            Err(Error::Unsupported(_))
        ));
        let xi2 = CylinderFunctional::new(2, vec![1.0], |x| x[0], 1.0, 1.0).unwrap();
        assert!(matches!(
            evaluate_cylinder(&xi2, &set, &cfg),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn sampled_checks_flag_breaches() {
        let xi = CylinderFunctional::terminal(1.0, |x| 3.0 * x, 1.0, 1.0).unwrap();
        let pts = vec![vec![0.0], vec![1.0]];
        let msgs = xi.check_sampled(&pts);
        assert_eq!(msgs.len(), 2);
    }
}
