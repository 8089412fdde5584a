//! SDEs, BSDEs and decoupled FBSDEs driven by G-Lévy processes.
//!
//! * `euler_sde` solves `dY = b ds + h : d<B> + σ · dB + K(s, Y_-, z) L(dz, ds)`
//!   pathwise with left-point coefficients.
//! * `picard_sde` runs the fixed-point map `Λ` of the existence proof on every
//!   scenario and measures the weighted-norm contraction.
//! * `solve_bsde` / `solve_fbsde` solve Markovian BSDEs by backward induction
//!   with the integro-PDE one-step operator.
//!
//! Within a grid step the continuous increment is applied first and the
//! step's jumps follow in time order, each seeing the state left by the
//! previous one. The Picard map uses the same event sequence, so its fixed
//! point is exactly the Euler solution.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::batch::pairwise_sum;
use crate::error::{Error, Result};
use crate::pide::{sample_payoff, Convention, Dynamics, GridFunction, PideConfig, Scheme};
use crate::scenario::{ControlPath, ScenarioPath, Simulator, TimeGrid};
use crate::stochint::continuity_constant;
use crate::sublinear::{Estimate, MonteCarlo};
use crate::uncertainty::{LevyTriple, UncertaintySet};

/// `(t, y, out)`.
pub type Coefficient = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// `(t, y, z, out)`.
pub type JumpCoefficient = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Declared Lipschitz constants in the state variable.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Lipschitz {
    pub b: f64,
    pub h: f64,
    pub sigma: f64,
    pub k: f64,
}

/// Coefficients of `dY = b ds + h : d<B> + σ · dB + K L(dz, ds)` for
/// `Y ∈ R^n` driven by a `d`-dimensional process.
///
/// Output layouts: `b` has `n` entries, `h` has `n` row-major `d x d`
/// blocks, `σ` has `n` rows of length `d`, and `K` has `n` entries.
#[derive(Clone)]
pub struct SdeSpec {
    pub n: usize,
    pub d: usize,
    pub b: Coefficient,
    pub h: Coefficient,
    pub sigma: Coefficient,
    pub k: JumpCoefficient,
    pub lipschitz: Lipschitz,
}

impl fmt::Debug for SdeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeSpec")
            .field("n", &self.n)
            .field("d", &self.d)
            .field("lipschitz", &self.lipschitz)
            .finish_non_exhaustive()
    }
}

fn zero_coefficient() -> Coefficient {
    Arc::new(|_, _, out: &mut [f64]| out.fill(0.0))
}

fn zero_jump() -> JumpCoefficient {
    Arc::new(|_, _, _, out: &mut [f64]| out.fill(0.0))
}

impl SdeSpec {
    /// All coefficients zero.
    pub fn zero(n: usize, d: usize) -> Self {
        Self {
            n,
            d,
            b: zero_coefficient(),
            h: zero_coefficient(),
            sigma: zero_coefficient(),
            k: zero_jump(),
            lipschitz: Lipschitz::default(),
        }
    }

    /// Scalar state and noise from time-homogeneous scalar coefficients
    /// `b(y)`, `h(y)`, `σ(y)`, `K(y, z)`.
    pub fn scalar(
        b: impl Fn(f64) -> f64 + Send + Sync + 'static,
        h: impl Fn(f64) -> f64 + Send + Sync + 'static,
        sigma: impl Fn(f64) -> f64 + Send + Sync + 'static,
        k: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        lipschitz: Lipschitz,
    ) -> Self {
        Self {
            n: 1,
            d: 1,
            b: Arc::new(move |_, y, out| out[0] = b(y[0])),
            h: Arc::new(move |_, y, out| out[0] = h(y[0])),
            sigma: Arc::new(move |_, y, out| out[0] = sigma(y[0])),
            k: Arc::new(move |_, y, z, out| out[0] = k(y[0], z[0])),
            lipschitz,
        }
    }

    /// `dY = a Y ds`.
    pub fn linear(a: f64) -> Self {
        Self::scalar(
            move |y| a * y,
            |_| 0.0,
            |_| 0.0,
            |_, _| 0.0,
            Lipschitz {
                b: a.abs(),
                ..Lipschitz::default()
            },
        )
    }

    /// `Y` doubles at every jump: `K(y, z) = y`.
    pub fn doubling() -> Self {
        Self::scalar(
            |_| 0.0,
            |_| 0.0,
            |_| 0.0,
            |y, _| y,
            Lipschitz {
                k: 1.0,
                ..Lipschitz::default()
            },
        )
    }

    /// The driving process itself: `dY = dB + z L(dz, ds)` (h = 0).
    pub fn identity() -> Self {
        Self::scalar(|_| 0.0, |_| 0.0, |_| 1.0, |_, z| z, Lipschitz::default())
    }

    fn check_dims(&self, y0: &[f64], path: &ScenarioPath) -> Result<()> {
        if y0.len() != self.n || path.dim() != self.d {
            return Err(Error::InvalidArgument(format!(
                "spec expects n = {}, d = {}; got y0 of length {} and a path of dimension {}",
                self.n,
                self.d,
                y0.len(),
                path.dim()
            )));
        }
        Ok(())
    }

    /// Spot-checks the declared Lipschitz constants on all pairs of
    /// `states`, with jump marks `marks`; returns one message per breach.
    pub fn check_lipschitz(&self, t: f64, states: &[Vec<f64>], marks: &[Vec<f64>]) -> Vec<String> {
        let (n, d) = (self.n, self.d);
        let mut out = Vec::new();
        let eval = |c: &Coefficient, len: usize, y: &[f64]| {
            let mut v = vec![0.0; len];
            c(t, y, &mut v);
            v
        };
        let dist = |a: &[f64], b: &[f64]| -> f64 {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        for i in 0..states.len() {
            for j in i + 1..states.len() {
                let (a, b) = (&states[i], &states[j]);
                let dx = dist(a, b);
                let mut check = |name: &str, lhs: f64, c: f64| {
                    if lhs > c * dx * (1.0 + 1e-9) + 1e-12 {
                        out.push(format!("{name}: |Δ| = {lhs} > {c} * {dx}"));
                    }
                };
                check(
                    "b",
                    dist(&eval(&self.b, n, a), &eval(&self.b, n, b)),
                    self.lipschitz.b,
                );
                check(
                    "h",
                    dist(&eval(&self.h, n * d * d, a), &eval(&self.h, n * d * d, b)),
                    self.lipschitz.h,
                );
                check(
                    "sigma",
                    dist(&eval(&self.sigma, n * d, a), &eval(&self.sigma, n * d, b)),
                    self.lipschitz.sigma,
                );
                for z in marks {
                    let (mut ka, mut kb) = (vec![0.0; n], vec![0.0; n]);
                    (self.k)(t, a, z, &mut ka);
                    (self.k)(t, b, z, &mut kb);
                    check("K", dist(&ka, &kb), self.lipschitz.k);
                }
            }
        }
        out
    }

    /// Contraction constant `C` of the weighted norm for horizon `T` and
    /// `<B>` rate bound `m`.
    pub fn contraction_constant(&self, horizon: f64, qv_rate: f64) -> f64 {
        let l = self.lipschitz;
        let terms = [
            horizon * l.b * l.b,
            horizon * qv_rate * qv_rate * l.h * l.h,
            qv_rate * l.sigma * l.sigma,
            continuity_constant(horizon) * l.k * l.k,
        ];
        let active = terms.iter().filter(|&&t| t > 0.0).count() as f64;
        active * terms.iter().sum::<f64>()
    }
}

/// Scratch buffers for coefficient evaluation.
struct Workspace {
    b: Vec<f64>,
    h: Vec<f64>,
    sigma: Vec<f64>,
    k: Vec<f64>,
}

impl Workspace {
    fn new(spec: &SdeSpec) -> Self {
        let (n, d) = (spec.n, spec.d);
        Self {
            b: vec![0.0; n],
            h: vec![0.0; n * d * d],
            sigma: vec![0.0; n * d],
            k: vec![0.0; n],
        }
    }

    fn check(&self, t: f64) -> Result<()> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if finite(&self.b) && finite(&self.h) && finite(&self.sigma) && finite(&self.k) {
            Ok(())
        } else {
            Err(Error::Coefficient(format!(
                "non-finite coefficient at t = {t}"
            )))
        }
    }

    /// Continuous increment of step `k` from state `y`.
    #[allow(clippy::too_many_arguments)]
    fn continuous(
        &mut self,
        spec: &SdeSpec,
        t: f64,
        y: &[f64],
        dt: f64,
        db: &[f64],
        dqv: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        let (n, d) = (spec.n, spec.d);
        (spec.b)(t, y, &mut self.b);
        (spec.h)(t, y, &mut self.h);
        (spec.sigma)(t, y, &mut self.sigma);
        self.check(t)?;
        for i in 0..n {
            let mut inc = self.b[i] * dt;
            for a in 0..d * d {
                inc += self.h[i * d * d + a] * dqv[a];
            }
            for a in 0..d {
                inc += self.sigma[i * d + a] * db[a];
            }
            out[i] = inc;
        }
        Ok(())
    }

    fn jump(&mut self, spec: &SdeSpec, t: f64, y: &[f64], z: &[f64]) -> Result<&[f64]> {
        (spec.k)(t, y, z, &mut self.k);
        if !self.k.iter().all(|x| x.is_finite()) {
            return Err(Error::Coefficient(format!(
                "non-finite jump coefficient at t = {t}"
            )));
        }
        Ok(&self.k)
    }
}

/// Euler solution at every grid node, row-major `nodes x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePath {
    pub n: usize,
    pub values: Vec<f64>,
}

impl StatePath {
    pub fn value(&self, k: usize) -> &[f64] {
        &self.values[k * self.n..(k + 1) * self.n]
    }

    pub fn terminal(&self) -> &[f64] {
        &self.values[self.values.len() - self.n..]
    }
}

/// Left-point Euler recursion along `path`.
pub fn euler_sde(spec: &SdeSpec, y0: &[f64], path: &ScenarioPath) -> Result<StatePath> {
    spec.check_dims(y0, path)?;
    let grid = path.grid();
    let n = spec.n;
    let mut ws = Workspace::new(spec);
    let mut y = y0.to_vec();
    let mut inc = vec![0.0; n];
    let mut values = Vec::with_capacity(grid.nodes() * n);
    values.extend_from_slice(&y);
    for step in 0..grid.steps() {
        euler_step(
            spec,
            &mut ws,
            grid.time(step),
            grid.dt(),
            path,
            step,
            &mut y,
            &mut inc,
        )?;
        values.extend_from_slice(&y);
    }
    Ok(StatePath { n, values })
}

#[allow(clippy::too_many_arguments)]
fn euler_step(
    spec: &SdeSpec,
    ws: &mut Workspace,
    t: f64,
    dt: f64,
    path: &ScenarioPath,
    step: usize,
    y: &mut [f64],
    inc: &mut [f64],
) -> Result<()> {
    let db = path.continuous_increment(step);
    let dqv = path.qv_increment(step);
    ws.continuous(spec, t, y, dt, &db, &dqv, inc)?;
    y.iter_mut().zip(inc.iter()).for_each(|(v, c)| *v += c);
    for j in path.jumps_in_step(step) {
        let k = ws.jump(spec, j.time, y, &j.size)?;
        y.iter_mut().zip(k).for_each(|(v, c)| *v += c);
    }
    Ok(())
}

/// `max_θ` MC mean of `φ(Y_T)` with `Y` from `euler_sde`.
#[allow(clippy::too_many_arguments)]
pub fn sde_upper_expectation(
    spec: &SdeSpec,
    y0: &[f64],
    phi: &(dyn Fn(&[f64]) -> f64 + Sync),
    set: &UncertaintySet,
    controls: &[ControlPath],
    grid: &TimeGrid,
    n: usize,
    seed: u64,
) -> Result<Estimate> {
    let mc = MonteCarlo::new(set, *grid, n, seed)?;
    mc.upper(controls, |p| Ok(phi(euler_sde(spec, y0, p)?.terminal())))
}

/// Initial process of a Picard run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PicardStart {
    /// `Y ≡ y0`.
    Initial,
    /// `Y ≡ y0 + c` in every component.
    Shifted(f64),
}

/// Event sequence of one path: the continuous part of each step followed by
/// its jumps.
enum Event<'a> {
    Continuous(usize),
    Jump(f64, &'a [f64]),
}

fn events(path: &ScenarioPath) -> (Vec<Event<'_>>, Vec<usize>) {
    let mut ev = Vec::with_capacity(path.grid().steps() + path.jumps().len());
    let mut node_event = Vec::with_capacity(path.grid().nodes());
    for step in 0..path.grid().steps() {
        node_event.push(ev.len());
        ev.push(Event::Continuous(step));
        for j in path.jumps_in_step(step) {
            ev.push(Event::Jump(j.time, &j.size));
        }
    }
    node_event.push(ev.len());
    (ev, node_event)
}

/// One application of `Λ`: `before` holds the left state of every event plus
/// the final state; the result has the same layout.
fn picard_map(
    spec: &SdeSpec,
    ws: &mut Workspace,
    y0: &[f64],
    path: &ScenarioPath,
    ev: &[Event<'_>],
    before: &[f64],
) -> Result<Vec<f64>> {
    let n = spec.n;
    let grid = path.grid();
    let mut out = Vec::with_capacity(before.len());
    out.extend_from_slice(y0);
    let mut inc = vec![0.0; n];
    for (e, event) in ev.iter().enumerate() {
        let old = &before[e * n..(e + 1) * n];
        match event {
            Event::Continuous(step) => {
                let db = path.continuous_increment(*step);
                let dqv = path.qv_increment(*step);
                ws.continuous(spec, grid.time(*step), old, grid.dt(), &db, &dqv, &mut inc)?;
            }
            Event::Jump(t, z) => inc.copy_from_slice(ws.jump(spec, *t, old, z)?),
        }
        for i in 0..n {
            let prev = out[e * n + i];
            out.push(prev + inc[i]);
        }
    }
    Ok(out)
}

fn node_sq_diff(a: &[f64], b: &[f64], n: usize, node_event: &[usize], out: &mut [f64]) {
    for (j, o) in out.iter_mut().enumerate() {
        let e = node_event[j + 1];
        *o = (0..n).map(|i| (a[e * n + i] - b[e * n + i]).powi(2)).sum();
    }
}

/// Weighted distances and ratios of a Picard run.
#[derive(Debug, Clone, PartialEq)]
pub struct PicardReport {
    /// Weight exponent `C` of `e^{-2Ct}`.
    pub constant: f64,
    /// `D_k` for `k = 1..=iterations`: distance between iterates `k` and `k-1`.
    pub distances: Vec<f64>,
    pub distance_std_errors: Vec<f64>,
    /// `D_{k+1} / D_k` (0 when `D_k = 0`).
    pub ratios: Vec<f64>,
    pub ratio_std_errors: Vec<f64>,
    /// Ratio above 1 for three consecutive iterations.
    pub diverged: bool,
    /// Weighted distance between the final iterates of the two starts.
    pub start_gap: f64,
    /// `2 · max` of the last distances of both starts (norms, not squares).
    pub start_tolerance: f64,
}

impl PicardReport {
    pub fn max_ratio(&self) -> Option<(f64, f64)> {
        self.ratios
            .iter()
            .zip(&self.ratio_std_errors)
            .map(|(&r, &s)| (r, s))
            .max_by(|a, b| a.0.total_cmp(&b.0))
    }

    /// Every ratio at most `bound + 3 se`.
    pub fn contracts(&self, bound: f64) -> bool {
        self.ratios
            .iter()
            .zip(&self.ratio_std_errors)
            .all(|(r, s)| *r <= bound + 3.0 * s)
    }

    pub fn unique(&self) -> bool {
        self.start_gap <= self.start_tolerance
    }
}

/// Floor added to the uniqueness tolerance to absorb roundoff.
pub const UNIQUENESS_FLOOR: f64 = 1e-12;

/// Runs `iterations` Picard steps from `Y ≡ y0` and from `Y ≡ y0 + 1` on every
/// scenario and reports the weighted distances
/// `D_k = ∫_0^T max_θ E[|Y^{(k)}_t - Y^{(k-1)}_t|²] e^{-2Ct} dt` (right-point
/// rule on the scenario grid), their ratios and the gap between the starts.
#[allow(clippy::too_many_arguments)]
pub fn picard_sde(
    spec: &SdeSpec,
    y0: &[f64],
    set: &UncertaintySet,
    controls: &[ControlPath],
    grid: &TimeGrid,
    n: usize,
    iterations: usize,
    seed: u64,
) -> Result<PicardReport> {
    picard_sde_from(
        spec,
        y0,
        set,
        controls,
        grid,
        n,
        iterations,
        seed,
        [PicardStart::Initial, PicardStart::Shifted(1.0)],
    )
}

/// `picard_sde` with explicit starting processes.
#[allow(clippy::too_many_arguments)]
pub fn picard_sde_from(
    spec: &SdeSpec,
    y0: &[f64],
    set: &UncertaintySet,
    controls: &[ControlPath],
    grid: &TimeGrid,
    n: usize,
    iterations: usize,
    seed: u64,
    starts: [PicardStart; 2],
) -> Result<PicardReport> {
    if iterations < 2 {
        return Err(Error::InvalidArgument(
            "Picard needs at least 2 iterations".into(),
        ));
    }
    if controls.is_empty() {
        return Err(Error::InvalidArgument("control family is empty".into()));
    }
    let steps = grid.steps();
    let dim = spec.n;
    let qv_rate = set
        .triples()
        .iter()
        .map(LevyTriple::covariance_trace)
        .fold(0.0, f64::max);
    let constant = spec.contraction_constant(grid.t_end() - grid.t0(), qv_rate);
    let mc = MonteCarlo::new(set, *grid, n, seed)?;
    // row: [iterations x steps] distances of start A, [steps] last distance
    // of start B, [steps] gap between A and B
    let width = (iterations + 2) * steps;
    let mut per_control = Vec::with_capacity(controls.len());
    for c in controls {
        per_control.push(mc.columns(c, width, |path, row| {
            spec.check_dims(y0, path)?;
            let (ev, node_event) = events(path);
            let mut ws = Workspace::new(spec);
            let start = |s: PicardStart| {
                let shift = match s {
                    PicardStart::Initial => 0.0,
                    PicardStart::Shifted(c) => c,
                };
                let one: Vec<f64> = y0.iter().map(|v| v + shift).collect();
                one.repeat(ev.len() + 1)
            };
            let mut a = start(starts[0]);
            for k in 0..iterations {
                let next = picard_map(spec, &mut ws, y0, path, &ev, &a)?;
                node_sq_diff(
                    &next,
                    &a,
                    dim,
                    &node_event,
                    &mut row[k * steps..(k + 1) * steps],
                );
                a = next;
            }
            let mut b = start(starts[1]);
            for k in 0..iterations {
                let next = picard_map(spec, &mut ws, y0, path, &ev, &b)?;
                if k + 1 == iterations {
                    node_sq_diff(
                        &next,
                        &b,
                        dim,
                        &node_event,
                        &mut row[iterations * steps..(iterations + 1) * steps],
                    );
                }
                b = next;
            }
            node_sq_diff(
                &a,
                &b,
                dim,
                &node_event,
                &mut row[(iterations + 1) * steps..],
            );
            Ok(())
        })?);
    }

    let dt = grid.dt();
    let weights: Vec<f64> = (1..=steps)
        .map(|j| dt * (-2.0 * constant * (grid.time(j) - grid.t0())).exp())
        .collect();
    // ∫ max_θ mean dt, with se bounded by the weighted sum of column se
    let weighted = |block: usize| -> (f64, f64) {
        let mut val = Vec::with_capacity(steps);
        let mut se = Vec::with_capacity(steps);
        for j in 0..steps {
            let col = block * steps + j;
            let best = per_control
                .iter()
                .map(|cols| crate::batch::SampleStats::from_samples(&cols[col]))
                .max_by(|a, b| a.mean.total_cmp(&b.mean))
                .expect("nonempty controls");
            val.push(weights[j] * best.mean);
            se.push(weights[j] * best.std_error);
        }
        (pairwise_sum(&val), pairwise_sum(&se))
    };
    let (mut distances, mut distance_std_errors) = (Vec::new(), Vec::new());
    for k in 0..iterations {
        let (v, s) = weighted(k);
        distances.push(v);
        distance_std_errors.push(s);
    }
    let (mut ratios, mut ratio_std_errors) = (Vec::new(), Vec::new());
    for k in 0..iterations - 1 {
        let (d0, d1) = (distances[k], distances[k + 1]);
        if d0 == 0.0 {
            ratios.push(0.0);
            ratio_std_errors.push(0.0);
            continue;
        }
        let r = d1 / d0;
        let rel0 = distance_std_errors[k] / d0;
        let rel1 = if d1 > 0.0 {
            distance_std_errors[k + 1] / d1
        } else {
            0.0
        };
        ratios.push(r);
        ratio_std_errors.push(r * (rel0 * rel0 + rel1 * rel1).sqrt());
    }
    let diverged = ratios.windows(3).any(|w| w.iter().all(|&r| r > 1.0));
    let last_b = weighted(iterations).0;
    let start_gap = weighted(iterations + 1).0.sqrt();
    let start_tolerance =
        2.0 * distances[iterations - 1].sqrt().max(last_b.sqrt()) + UNIQUENESS_FLOOR;
    Ok(PicardReport {
        constant,
        distances,
        distance_std_errors,
        ratios,
        ratio_std_errors,
        diverged,
        start_gap,
        start_tolerance,
    })
}

/// `(s, y) -> value`.
pub type Generator = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Markovian scalar BSDE `Y_t = Ê[Φ(X_T) + ∫_t^T b(s,Y) ds + ∫_t^T h(s,Y) d<B> | Ω_t]`
/// with `X` the G-Lévy process itself.
#[derive(Clone)]
pub struct BsdeSpec {
    pub terminal: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub b: Generator,
    pub h: Generator,
    pub horizon: f64,
}

impl fmt::Debug for BsdeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BsdeSpec")
            .field("horizon", &self.horizon)
            .finish_non_exhaustive()
    }
}

impl BsdeSpec {
    pub fn new(
        terminal: impl Fn(f64) -> f64 + Send + Sync + 'static,
        b: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        h: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        horizon: f64,
    ) -> Self {
        Self {
            terminal: Arc::new(terminal),
            b: Arc::new(b),
            h: Arc::new(h),
            horizon,
        }
    }

    /// `b = h = 0`.
    pub fn zero_generators(
        terminal: impl Fn(f64) -> f64 + Send + Sync + 'static,
        horizon: f64,
    ) -> Self {
        Self::new(terminal, |_, _| 0.0, |_, _| 0.0, horizon)
    }
}

/// Maximum inner fixed-point iterations per node and level.
pub const INNER_ITERATIONS: usize = 5;
/// Inner fixed-point tolerance.
pub const INNER_TOLERANCE: f64 = 1e-10;

/// Running generator `(s, x, y) -> (ds coefficient, d<B> coefficient)`.
type Running<'a> = &'a (dyn Fn(f64, f64, f64) -> (f64, f64) + Sync);

/// Backward induction `y_k = y_{k+1} + Δt max_i (G_i y_{k+1} + h q_i) + b Δt`
/// with the generators evaluated at `y_k` by fixed-point iteration.
fn backward_induction(
    dynamics: &dyn Dynamics,
    terminal: &dyn Fn(f64) -> f64,
    running: Running<'_>,
    horizon: f64,
    set: &UncertaintySet,
    cfg: &PideConfig,
) -> Result<GridFunction> {
    if !(horizon > 0.0) {
        return Err(Error::InvalidGrid(format!(
            "horizon must be positive, got {horizon}"
        )));
    }
    let grid = cfg.space;
    let scheme = Scheme::new(set, grid, dynamics)?;
    let steps = cfg.steps_for(horizon);
    let dt = horizon / steps as f64;
    scheme.check_cfl(dt)?;
    let rates: Vec<f64> = set.triples().iter().map(|t| t.covariance()[0]).collect();
    let times: Vec<f64> = (0..=steps)
        .map(|k| if k == steps { horizon } else { k as f64 * dt })
        .collect();

    let mut values = vec![Vec::new(); steps + 1];
    let mut argmax = vec![Vec::new(); steps + 1];
    values[steps] = sample_payoff(&grid, terminal)?;
    argmax[steps] = scheme.argmax(&values[steps]);
    for k in (0..steps).rev() {
        let s = times[k];
        let next = &values[k + 1];
        let solved: Vec<(f64, usize)> = (0..grid.nodes())
            .into_par_iter()
            .map(|j| {
                let x = grid.x(j);
                let eval = |y: f64| {
                    let (b, h) = running(s, x, y);
                    let (g, i) = scheme.best(next, j, &|i| h * rates[i]);
                    (next[j] + dt * g + b * dt, i)
                };
                let mut current = eval(next[j]);
                let mut change = f64::INFINITY;
                for _ in 0..INNER_ITERATIONS {
                    let candidate = eval(current.0);
                    change = (candidate.0 - current.0).abs();
                    current = candidate;
                    if change <= INNER_TOLERANCE {
                        return Ok(current);
                    }
                }
                Err(Error::NoConvergence { t: s, change })
            })
            .collect::<Result<_>>()?;
        let (v, a): (Vec<f64>, Vec<usize>) = solved.into_iter().unzip();
        if let Some(j) = v.iter().position(|y| !y.is_finite()) {
            return Err(Error::Coefficient(format!(
                "non-finite value at t = {s}, x = {}",
                grid.x(j)
            )));
        }
        values[k] = v;
        argmax[k] = a;
    }
    Ok(GridFunction::from_parts(
        grid,
        times,
        values,
        argmax,
        Convention::Terminal,
    ))
}

/// Solves a Markovian BSDE on the spatial grid of `cfg`; the result is in the
/// terminal convention, `y(t_k, x)` at level `k`.
pub fn solve_bsde(spec: &BsdeSpec, set: &UncertaintySet, cfg: &PideConfig) -> Result<GridFunction> {
    let running = |s: f64, _x: f64, y: f64| ((spec.b)(s, y), (spec.h)(s, y));
    backward_induction(
        &crate::pide::LevyDynamics,
        &*spec.terminal,
        &running,
        spec.horizon,
        set,
        cfg,
    )
}

/// Scalar forward dynamics `dX = b(X) ds + h(X) d<B> + σ(X) dB + K(X_-, z) L(dz, ds)`.
#[derive(Clone)]
pub struct ForwardSpec {
    pub b: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub h: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub sigma: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub k: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    pub lipschitz: Lipschitz,
}

impl fmt::Debug for ForwardSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ForwardSpec")
            .field("lipschitz", &self.lipschitz)
            .finish_non_exhaustive()
    }
}

impl ForwardSpec {
    pub fn new(
        b: impl Fn(f64) -> f64 + Send + Sync + 'static,
        h: impl Fn(f64) -> f64 + Send + Sync + 'static,
        sigma: impl Fn(f64) -> f64 + Send + Sync + 'static,
        k: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        lipschitz: Lipschitz,
    ) -> Self {
        Self {
            b: Arc::new(b),
            h: Arc::new(h),
            sigma: Arc::new(sigma),
            k: Arc::new(k),
            lipschitz,
        }
    }

    /// `X = x0 + B` (jumps by the mark, unit volatility loading).
    pub fn identity() -> Self {
        Self::new(|_| 0.0, |_| 0.0, |_| 1.0, |_, z| z, Lipschitz::default())
    }

    pub fn as_sde(&self) -> SdeSpec {
        let (b, h, s, k) = (
            self.b.clone(),
            self.h.clone(),
            self.sigma.clone(),
            self.k.clone(),
        );
        SdeSpec::scalar(
            move |x| b(x),
            move |x| h(x),
            move |x| s(x),
            move |x, z| k(x, z),
            self.lipschitz,
        )
    }
}

impl Dynamics for ForwardSpec {
    fn jump_target(&self, x: f64, z: f64) -> f64 {
        x + (self.k)(x, z)
    }

    fn drift(&self, x: f64, triple: &LevyTriple) -> f64 {
        (self.b)(x) + (self.h)(x) * triple.covariance()[0] + (self.sigma)(x) * triple.drift[0]
    }

    fn diffusion(&self, x: f64, triple: &LevyTriple) -> f64 {
        let s = (self.sigma)(x);
        s * s * triple.covariance()[0]
    }
}

/// Decoupled FBSDE: forward `X` from `x0`, backward
/// `Y_s = Ê[Φ(X_T) + ∫_s^T f(X,Y) dr + ∫_s^T g(X,Y) d<B> | Ω_s]`.
#[derive(Clone)]
pub struct FbsdeSpec {
    pub forward: ForwardSpec,
    pub x0: f64,
    pub terminal: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub f: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    pub g: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    pub horizon: f64,
}

impl fmt::Debug for FbsdeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FbsdeSpec")
            .field("forward", &self.forward)
            .field("x0", &self.x0)
            .field("horizon", &self.horizon)
            .finish_non_exhaustive()
    }
}

/// Sampling parameters of the FBSDE recomputation check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FbsdeSettings {
    /// Number of sampled `(s, X_s)` points.
    pub points: usize,
    /// Look-ahead in solver time steps.
    pub lookahead: usize,
    pub samples: usize,
    pub seed: u64,
    /// Constant `c` of the grid error `c·(Δt + h)`.
    pub grid_constant: f64,
}

/// One recomputed point `y(s, x)` vs `max_θ E[y(s+δ, X_{s+δ}) + ∫ f dr + ∫ g d<B>]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RecomputedPoint {
    pub s: f64,
    pub x: f64,
    pub field: f64,
    pub recomputed: f64,
    pub std_error: f64,
    pub residual: f64,
    pub tolerance: f64,
}

impl RecomputedPoint {
    pub fn passed(&self) -> bool {
        self.residual <= self.tolerance
    }
}

#[derive(Debug, Clone)]
pub struct FbsdeReport {
    pub field: GridFunction,
    /// `y(0, x0)`.
    pub y0: f64,
    /// `(s, X_s, Y_s)` along the first sampled scenario.
    pub pairs: Vec<(f64, f64, f64)>,
    /// `max |Y_s - y(s, X_s)|` along that scenario.
    pub consistency: f64,
    pub points: Vec<RecomputedPoint>,
}

impl FbsdeReport {
    pub fn passed(&self) -> bool {
        self.points.iter().all(RecomputedPoint::passed)
    }

    pub fn max_residual(&self) -> f64 {
        self.points.iter().fold(0.0, |a, p| a.max(p.residual))
    }
}

/// How the forward simulation picks a triple.
#[derive(Clone, Copy)]
enum Selector<'a> {
    Triple(usize),
    /// Argmax of the field at `(t, X_t)`.
    Field(&'a GridFunction),
}

/// Forward Euler state `X` on the nodes of `sim`'s grid, with the triple of
/// each step chosen from the current `(t, X)`.
fn simulate_forward(
    fwd: &SdeSpec,
    x0: f64,
    sim: &Simulator<'_>,
    selector: Selector<'_>,
    seed: u64,
    replicate: u64,
) -> Result<(ScenarioPath, Vec<f64>)> {
    let grid = *sim.grid();
    let mut st = sim.stepper(seed, replicate);
    let mut ws = Workspace::new(fwd);
    let mut x = vec![x0];
    let mut inc = vec![0.0];
    let mut xs = Vec::with_capacity(grid.nodes());
    xs.push(x0);
    for k in 0..grid.steps() {
        let t = grid.time(k);
        let i = match selector {
            Selector::Triple(i) => i,
            Selector::Field(u) => u.argmax_at(t, x[0]),
        };
        st.step(i)?;
        euler_step(fwd, &mut ws, t, grid.dt(), st.path(), k, &mut x, &mut inc)?;
        xs.push(x[0]);
    }
    Ok((st.finish(), xs))
}

/// Solves the decoupled FBSDE: the value field by backward induction over the
/// forward state, then a recomputation check at sampled `(s, X_s)`.
pub fn solve_fbsde(
    spec: &FbsdeSpec,
    set: &UncertaintySet,
    cfg: &PideConfig,
    settings: FbsdeSettings,
) -> Result<FbsdeReport> {
    let running = |_s: f64, x: f64, y: f64| ((spec.f)(x, y), (spec.g)(x, y));
    let field = backward_induction(
        &spec.forward,
        &*spec.terminal,
        &running,
        spec.horizon,
        set,
        cfg,
    )?;
    let y0 = field.grid().interpolate(field.level(0), spec.x0);
    let fwd = spec.forward.as_sde();
    let levels = field.levels() - 1;
    let dt = field.dt();
    let look = settings.lookahead.clamp(1, levels);

    // sampled forward scenario(s) under the field's own feedback control
    let full = TimeGrid::new(0.0, spec.horizon, levels)?;
    let sim = Simulator::new(set, full)?;
    let (_, xs) = simulate_forward(
        &fwd,
        spec.x0,
        &sim,
        Selector::Field(&field),
        settings.seed,
        0,
    )?;
    let pairs: Vec<(f64, f64, f64)> = xs
        .iter()
        .enumerate()
        .map(|(k, &x)| (full.time(k), x, field.grid().interpolate(field.level(k), x)))
        .collect();
    let consistency = pairs
        .iter()
        .enumerate()
        .map(|(k, &(_, x, y))| (y - field.grid().interpolate(field.level(k), x)).abs())
        .fold(0.0, f64::max);

    let grid_error = settings.grid_constant * (dt + field.grid().h());
    let mut points = Vec::with_capacity(settings.points);
    for p in 0..settings.points {
        let span = levels - look;
        let level = if settings.points > 1 {
            p * span / (settings.points - 1)
        } else {
            0
        };
        let (_, xs) = simulate_forward(
            &fwd,
            spec.x0,
            &sim,
            Selector::Field(&field),
            settings.seed,
            p as u64 + 1,
        )?;
        let (s, x) = (field.times()[level], xs[level]);
        let local = TimeGrid::new(s, field.times()[level + look], look)?;
        let lsim = Simulator::new(set, local)?;
        let later = field.level(level + look);
        let mut selectors: Vec<Selector<'_>> = (0..set.len()).map(Selector::Triple).collect();
        selectors.push(Selector::Field(&field));
        let mut best: Option<(f64, f64)> = None;
        for sel in selectors {
            let rows = crate::batch::map_replicates(settings.samples, |r| {
                let (path, xs) = simulate_forward(&fwd, x, &lsim, sel, settings.seed ^ 0x5eed, r)?;
                let mut acc = field.grid().interpolate(later, xs[look]);
                for k in 0..look {
                    let y = field.grid().interpolate(field.level(level + k), xs[k]);
                    let dqv = path.qv_increment(k)[0];
                    acc += (spec.f)(xs[k], y) * local.dt() + (spec.g)(xs[k], y) * dqv;
                }
                Ok(acc)
            })?;
            let st = crate::batch::SampleStats::from_samples(&rows);
            if best.is_none_or(|(m, _)| st.mean > m) {
                best = Some((st.mean, st.std_error));
            }
        }
        let (recomputed, std_error) = best.expect("at least one selector");
        let value = field.grid().interpolate(field.level(level), x);
        let residual = (value - recomputed).abs();
        points.push(RecomputedPoint {
            s,
            x,
            field: value,
            recomputed,
            std_error,
            residual,
            tolerance: 3.0 * std_error + grid_error,
        });
    }
    Ok(FbsdeReport {
        field,
        y0,
        pairs,
        consistency,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pide::{solve_pide, SpatialGrid};
    use crate::uncertainty::JumpMeasure;

    fn poisson() -> UncertaintySet {
        UncertaintySet::singleton(LevyTriple::scalar(
            JumpMeasure::scalar(&[(1.0, 1.0)]),
            0.0,
            0.0,
        ))
    }

    #[test]
    fn zero_spec_is_constant() {
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let set = poisson();
        let sim = Simulator::new(&set, grid).unwrap();
        let p = sim.path(&ControlPath::constant(0), 1, 0).unwrap();
        let y = euler_sde(&SdeSpec::zero(1, 1), &[0.4], &p).unwrap();
        assert!(y.values.iter().all(|&v| v == 0.4));
    }

    #[test]
    fn linear_ode_is_euler() {
        let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let set = poisson();
        let sim = Simulator::new(&set, grid).unwrap();
        let p = sim.path(&ControlPath::constant(0), 1, 0).unwrap();
        let y = euler_sde(&SdeSpec::linear(-1.0), &[1.0], &p).unwrap();
        assert!((y.terminal()[0] - 0.99f64.powi(100)).abs() < 1e-12);
    }

    #[test]
    fn doubling_tracks_jumps() {
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let set = poisson();
        let sim = Simulator::new(&set, grid).unwrap();
        for r in 0..10 {
            let p = sim.path(&ControlPath::constant(0), 3, r).unwrap();
            let y = euler_sde(&SdeSpec::doubling(), &[1.0], &p).unwrap();
            assert_eq!(y.terminal()[0], 2f64.powi(p.jumps().len() as i32));
        }
    }

    #[test]
    fn picard_reaches_euler_and_zero_spec_is_immediate() {
        let set = poisson();
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let c = ControlPath::all_constants(&set);
        let r = picard_sde(&SdeSpec::zero(1, 1), &[1.0], &set, &c, &grid, 20, 3, 0).unwrap();
        assert_eq!(r.distances[0], 0.0);
        let r = picard_sde(&SdeSpec::doubling(), &[1.0], &set, &c, &grid, 50, 40, 0).unwrap();
        assert_eq!(*r.distances.last().unwrap(), 0.0);
        assert!(r.unique());
    }

    #[test]
    fn linear_picard_contracts() {
        let set = poisson();
        let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let c = ControlPath::all_constants(&set);
        let r = picard_sde(&SdeSpec::linear(-1.0), &[1.0], &set, &c, &grid, 20, 8, 0).unwrap();
        assert_eq!(r.constant, 1.0);
        assert!(r.contracts(0.5), "{:?}", r.ratios);
        assert!(!r.diverged);
    }

    #[test]
    fn bsde_matches_pide_bitwise() {
        let set = UncertaintySet::new(vec![
            LevyTriple::scalar(JumpMeasure::scalar(&[(1.0, 0.5)]), 0.0, 0.3),
            LevyTriple::scalar(JumpMeasure::scalar(&[(1.0, 1.0)]), 0.0, 0.0),
        ]);
        let g = SpatialGrid::new(-2.0, 5.0, 71).unwrap();
        let cfg = PideConfig::new(g, 0.02);
        let phi = |x: f64| x.clamp(0.0, 2.0);
        let b = solve_bsde(&BsdeSpec::zero_generators(phi, 1.0), &set, &cfg).unwrap();
        let u = solve_pide(&phi, 1.0, g, 50, &set, Convention::Terminal).unwrap();
        assert_eq!(b, u);
    }

    #[test]
    fn linear_generator_bsde() {
        let set = poisson();
        let g = SpatialGrid::new(-1.0, 3.0, 41).unwrap();
        let cfg = PideConfig::new(g, 0.01);
        let spec = BsdeSpec::new(|_| 1.0, |_, y| -y, |_, _| 0.0, 1.0);
        let y = solve_bsde(&spec, &set, &cfg).unwrap();
        let y0 = y.origin_value();
        assert!((y0 - (-1.0f64).exp()).abs() < 0.01);
        assert!(y.level(0).iter().all(|&v| (v - y0).abs() < 1e-12));
    }

    #[test]
    fn constant_fbsde() {
        let set = poisson();
        let g = SpatialGrid::new(-1.0, 4.0, 26).unwrap();
        let spec = FbsdeSpec {
            forward: ForwardSpec::identity(),
            x0: 0.0,
            terminal: Arc::new(|_| 0.7),
            f: Arc::new(|_, _| 0.0),
            g: Arc::new(|_, _| 0.0),
            horizon: 1.0,
        };
        let settings = FbsdeSettings {
            points: 3,
            lookahead: 2,
            samples: 50,
            seed: 1,
            grid_constant: 1.0,
        };
        let r = solve_fbsde(&spec, &set, &PideConfig::new(g, 0.1), settings).unwrap();
        assert_eq!(r.y0, 0.7);
        assert!(r.pairs.iter().all(|p| p.2 == 0.7));
        assert!(r.passed());
    }
}
