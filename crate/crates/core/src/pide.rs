//! Explicit monotone finite-difference solver for the sup-type nonlocal
//! integro-PDE `∂_t u = max_{(v,p,Q) ∈ U} { ∫[u(x+z) − u(x)] v(dz) + p u' + ½ QQᵀ u'' }`
//! in one space dimension, plus the dynamic programming and residual checks.
//!
//! Drift is discretized upwind, diffusion by central differences, and the
//! jump term as an exact sum over atoms. Values outside the truncated domain
//! are extended by constants and off-node jump targets use linear
//! interpolation, which keeps the scheme monotone under the CFL bound.

use std::io::{self, Write};
use std::sync::Arc;

use rayon::prelude::*;

use crate::csvfmt::fmt12;
use crate::error::{Error, Result};
use crate::scenario::{ControlPath, TimeGrid};
use crate::sublinear::MonteCarlo;
use crate::uncertainty::{LevyTriple, UncertaintySet};

/// Uniform one-dimensional grid on `[x_min, x_max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialGrid {
    x_min: f64,
    x_max: f64,
    nodes: usize,
}

/// Margin applied to the largest jump reach when sizing a domain.
pub const DOMAIN_SAFETY: f64 = 1.5;

impl SpatialGrid {
    pub fn new(x_min: f64, x_max: f64, nodes: usize) -> Result<Self> {
        if !(x_min.is_finite() && x_max.is_finite() && x_max > x_min) {
            return Err(Error::InvalidGrid(format!(
                "need x_min < x_max, got [{x_min}, {x_max}]"
            )));
        }
        if nodes < 3 {
            return Err(Error::InvalidGrid(format!(
                "need at least 3 nodes, got {nodes}"
            )));
        }
        Ok(Self {
            x_min,
            x_max,
            nodes,
        })
    }

    /// Domain covering `[lo, hi]` plus `DOMAIN_SAFETY` times `reach` on both
    /// sides, with spacing at most `h`. `lo - margin` is kept on the grid when
    /// it is a multiple of `h`.
    pub fn covering(lo: f64, hi: f64, reach: f64, h: f64) -> Result<Self> {
        if !(h > 0.0) || hi < lo {
            return Err(Error::InvalidGrid(
                "covering needs h > 0 and lo <= hi".into(),
            ));
        }
        let margin = DOMAIN_SAFETY * reach.abs();
        let x_min = ((lo - margin) / h).floor() * h;
        let x_max = ((hi + margin) / h).ceil() * h;
        let cells = ((x_max - x_min) / h).round().max(2.0) as usize;
        Self::new(x_min, x_min + cells as f64 * h, cells + 1)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn h(&self) -> f64 {
        (self.x_max - self.x_min) / (self.nodes - 1) as f64
    }

    pub fn x(&self, j: usize) -> f64 {
        if j + 1 == self.nodes {
            self.x_max
        } else {
            self.x_min + j as f64 * self.h()
        }
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.nodes).map(|j| self.x(j)).collect()
    }

    /// Cell index `i ∈ [0, nodes-2]` and weight of node `i+1`, clamped to the domain.
    pub fn locate(&self, x: f64) -> (usize, f64) {
        if !(x > self.x_min) {
            return (0, 0.0);
        }
        if x >= self.x_max {
            return (self.nodes - 2, 1.0);
        }
        let s = (x - self.x_min) / self.h();
        let i = (s.floor() as usize).min(self.nodes - 2);
        (i, (s - i as f64).clamp(0.0, 1.0))
    }

    /// Linear interpolation with constant extension.
    pub fn interpolate(&self, values: &[f64], x: f64) -> f64 {
        let (i, w) = self.locate(x);
        if w == 0.0 {
            values[i]
        } else if w == 1.0 {
            values[i + 1]
        } else {
            (1.0 - w) * values[i] + w * values[i + 1]
        }
    }

    /// Index of the node at `x` (within 1e-9 cells).
    pub fn node_index(&self, x: f64) -> Result<usize> {
        let s = (x - self.x_min) / self.h();
        let j = s.round();
        if (s - j).abs() > 1e-9 || j < 0.0 || j > (self.nodes - 1) as f64 {
            return Err(Error::InvalidArgument(format!(
                "x = {x} is not a node of the spatial grid"
            )));
        }
        Ok(j as usize)
    }

    pub fn nearest(&self, x: f64) -> usize {
        let s = ((x - self.x_min) / self.h()).round();
        s.clamp(0.0, (self.nodes - 1) as f64) as usize
    }
}

/// Which end of the time interval carries `φ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convention {
    /// `u(0, ·) = φ`, `u(t, x) = Ê[φ(x + X_t)]`.
    Initial,
    /// `u(T, ·) = φ`, the dynamic-programming form.
    Terminal,
}

/// Coefficients of the controlled dynamics whose generator the scheme uses.
pub trait Dynamics: Sync {
    /// Post-jump position for a jump of mark `z` from `x`.
    fn jump_target(&self, x: f64, z: f64) -> f64;
    /// First-order coefficient.
    fn drift(&self, x: f64, triple: &LevyTriple) -> f64;
    /// Second-order coefficient (the generator uses one half of it).
    fn diffusion(&self, x: f64, triple: &LevyTriple) -> f64;
}

/// The G-Lévy process itself: jumps by `z`, drift `p`, diffusion `QQᵀ`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LevyDynamics;

impl Dynamics for LevyDynamics {
    fn jump_target(&self, x: f64, z: f64) -> f64 {
        x + z
    }

    fn drift(&self, _x: f64, triple: &LevyTriple) -> f64 {
        triple.drift[0]
    }

    fn diffusion(&self, _x: f64, triple: &LevyTriple) -> f64 {
        triple.covariance()[0]
    }
}

fn require_scalar(set: &UncertaintySet) -> Result<()> {
    if set.dim() != 1 {
        return Err(Error::Unsupported(format!(
            "the integro-PDE solver is one-dimensional, got d = {}",
            set.dim()
        )));
    }
    if set.is_empty() {
        return Err(Error::InvalidSet("uncertainty set is empty".into()));
    }
    Ok(())
}

/// Generator `G(u)(x_j)` for one triple, with constant extension and linear
/// interpolation of jump targets.
pub fn apply_generator(grid: &SpatialGrid, slice: &[f64], j: usize, triple: &LevyTriple) -> f64 {
    generator_with(&LevyDynamics, grid, slice, j, triple)
}

/// `apply_generator` for arbitrary dynamics.
pub fn generator_with(
    dynamics: &dyn Dynamics,
    grid: &SpatialGrid,
    slice: &[f64],
    j: usize,
    triple: &LevyTriple,
) -> f64 {
    let n = grid.nodes();
    let h = grid.h();
    let x = grid.x(j);
    let u = slice[j];
    let left = slice[j.saturating_sub(1)];
    let right = slice[(j + 1).min(n - 1)];
    let mut g = 0.0;
    for atom in triple.measure.atoms() {
        let target = grid.interpolate(slice, dynamics.jump_target(x, atom.location[0]));
        g += atom.weight * (target - u);
    }
    let p = dynamics.drift(x, triple);
    if p > 0.0 {
        g += p * (right - u) / h;
    } else if p < 0.0 {
        g += p * (u - left) / h;
    }
    let q = dynamics.diffusion(x, triple);
    if q != 0.0 {
        g += 0.5 * q * (right - 2.0 * u + left) / (h * h);
    }
    g
}

#[derive(Debug, Clone, Copy)]
struct JumpStencil {
    cell: usize,
    frac: f64,
    weight: f64,
}

#[derive(Debug, Clone, Copy)]
struct LocalStencil {
    drift: f64,
    half_diffusion: f64,
}

/// Precomputed stencils for every (triple, node).
pub(crate) struct Scheme {
    grid: SpatialGrid,
    triples: usize,
    // [triple][node] -> atoms
    jumps: Vec<Vec<Vec<JumpStencil>>>,
    local: Vec<Vec<LocalStencil>>,
    max_mass: f64,
    max_drift: f64,
    max_diffusion: f64,
}

/// Nodes per parallel work item.
const NODE_CHUNK: usize = 256;

impl Scheme {
    pub(crate) fn new(
        set: &UncertaintySet,
        grid: SpatialGrid,
        dynamics: &dyn Dynamics,
    ) -> Result<Self> {
        require_scalar(set)?;
        let n = grid.nodes();
        let mut jumps = Vec::with_capacity(set.len());
        let mut local = Vec::with_capacity(set.len());
        let (mut max_drift, mut max_diffusion): (f64, f64) = (0.0, 0.0);
        for triple in set.triples() {
            let mut tj = Vec::with_capacity(n);
            let mut tl = Vec::with_capacity(n);
            for j in 0..n {
                let x = grid.x(j);
                tj.push(
                    triple
                        .measure
                        .atoms()
                        .iter()
                        .map(|a| {
                            let (cell, frac) = grid.locate(dynamics.jump_target(x, a.location[0]));
                            JumpStencil {
                                cell,
                                frac,
                                weight: a.weight,
                            }
                        })
                        .collect(),
                );
                let drift = dynamics.drift(x, triple);
                let q = dynamics.diffusion(x, triple);
                if !drift.is_finite() || !q.is_finite() || q < 0.0 {
                    return Err(Error::Coefficient(format!(
                        "drift {drift} / diffusion {q} at x = {x}"
                    )));
                }
                max_drift = max_drift.max(drift.abs());
                max_diffusion = max_diffusion.max(q);
                tl.push(LocalStencil {
                    drift,
                    half_diffusion: 0.5 * q,
                });
            }
            jumps.push(tj);
            local.push(tl);
        }
        Ok(Self {
            grid,
            triples: set.len(),
            jumps,
            local,
            max_mass: set.max_mass(),
            max_drift,
            max_diffusion,
        })
    }

    /// `max_v mass + max|p|/h + max q/h²`.
    pub(crate) fn rate(&self) -> f64 {
        let h = self.grid.h();
        self.max_mass + self.max_drift / h + self.max_diffusion / (h * h)
    }

    pub(crate) fn check_cfl(&self, dt: f64) -> Result<()> {
        let ratio = dt * self.rate();
        if ratio > 1.0 + 1e-12 {
            return Err(Error::Cfl { ratio });
        }
        Ok(())
    }

    pub(crate) fn generator(&self, u: &[f64], i: usize, j: usize) -> f64 {
        let n = self.grid.nodes();
        let h = self.grid.h();
        let uj = u[j];
        let mut g = 0.0;
        for s in &self.jumps[i][j] {
            let target = if s.frac == 0.0 {
                u[s.cell]
            } else if s.frac == 1.0 {
                u[s.cell + 1]
            } else {
                (1.0 - s.frac) * u[s.cell] + s.frac * u[s.cell + 1]
            };
            g += s.weight * (target - uj);
        }
        let l = self.local[i][j];
        let left = u[j.saturating_sub(1)];
        let right = u[(j + 1).min(n - 1)];
        if l.drift > 0.0 {
            g += l.drift * (right - uj) / h;
        } else if l.drift < 0.0 {
            g += l.drift * (uj - left) / h;
        }
        if l.half_diffusion != 0.0 {
            g += l.half_diffusion * (right - 2.0 * uj + left) / (h * h);
        }
        g
    }

    /// `max_i (G_i u(x_j) + bonus(i))` and the first maximizing index.
    pub(crate) fn best(&self, u: &[f64], j: usize, bonus: &dyn Fn(usize) -> f64) -> (f64, usize) {
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0;
        for i in 0..self.triples {
            let g = self.generator(u, i, j) + bonus(i);
            if g > best {
                best = g;
                arg = i;
            }
        }
        (best, arg)
    }

    /// One explicit step; returns the argmax field of `u`.
    pub(crate) fn advance(&self, u: &[f64], dt: f64, out: &mut [f64]) -> Vec<usize> {
        let mut arg = vec![0; u.len()];
        out.par_chunks_mut(NODE_CHUNK)
            .zip(arg.par_chunks_mut(NODE_CHUNK))
            .enumerate()
            .for_each(|(c, (o, a))| {
                for (k, (oj, aj)) in o.iter_mut().zip(a.iter_mut()).enumerate() {
                    let j = c * NODE_CHUNK + k;
                    let (g, i) = self.best(u, j, &|_| 0.0);
                    *oj = u[j] + dt * g;
                    *aj = i;
                }
            });
        arg
    }

    pub(crate) fn argmax(&self, u: &[f64]) -> Vec<usize> {
        (0..u.len())
            .into_par_iter()
            .map(|j| self.best(u, j, &|_| 0.0).1)
            .collect()
    }
}

pub(crate) fn sample_payoff(grid: &SpatialGrid, phi: &dyn Fn(f64) -> f64) -> Result<Vec<f64>> {
    grid.points()
        .into_iter()
        .map(|x| {
            let v = phi(x);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::UnboundedPayoff { x })
            }
        })
        .collect()
}

/// Discretized `u(t, x)` with its argmax (feedback control) field.
///
/// Levels are stored by increasing time. In the terminal convention the
/// argmax at level `k` is the triple to use on `(t_k, t_{k+1}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: SpatialGrid,
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
    argmax: Vec<Vec<usize>>,
    convention: Convention,
}

impl GridFunction {
    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn convention(&self) -> Convention {
        self.convention
    }

    pub fn levels(&self) -> usize {
        self.times.len()
    }

    pub fn dt(&self) -> f64 {
        self.times[1] - self.times[0]
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    pub fn level(&self, k: usize) -> &[f64] {
        &self.values[k]
    }

    pub fn argmax(&self, k: usize) -> &[usize] {
        &self.argmax[k]
    }

    /// Level index of time `t` (within 1e-9 steps).
    pub fn level_index(&self, t: f64) -> Result<usize> {
        let s = (t - self.times[0]) / self.dt();
        let k = s.round();
        if (s - k).abs() > 1e-9 || k < 0.0 || k as usize >= self.times.len() {
            return Err(Error::OffGrid { time: t });
        }
        Ok(k as usize)
    }

    /// `u(t, x)` at a stored time, interpolated in `x`.
    pub fn value_at(&self, t: f64, x: f64) -> Result<f64> {
        Ok(self.grid.interpolate(&self.values[self.level_index(t)?], x))
    }

    /// The value at `(T, 0)` in the initial convention, `(0, 0)` in the terminal one.
    pub fn origin_value(&self) -> f64 {
        let k = match self.convention {
            Convention::Initial => self.levels() - 1,
            Convention::Terminal => 0,
        };
        self.grid.interpolate(&self.values[k], 0.0)
    }

    /// Declared discretization error bound `c·(Δt + h)`.
    pub fn error_bound(&self, c: f64) -> f64 {
        c * (self.dt() + self.grid.h())
    }

    /// Argmax triple for a state at time `t` (level containing `t`, nearest node).
    pub fn argmax_at(&self, t: f64, x: f64) -> usize {
        let s = ((t - self.times[0]) / self.dt() + 1e-9).floor();
        let k = s.clamp(0.0, (self.levels() - 1) as f64) as usize;
        self.argmax[k][self.grid.nearest(x)]
    }

    /// Feedback control reading the argmax field at `x0 + B_t`. Requires the
    /// terminal convention.
    pub fn feedback_control(&self, x0: f64) -> Result<ControlPath> {
        if self.convention != Convention::Terminal {
            return Err(Error::InvalidArgument(
                "feedback controls need the terminal convention".into(),
            ));
        }
        let field = Arc::new(self.clone());
        Ok(ControlPath::feedback("pide-argmax", move |t, state| {
            field.argmax_at(t, x0 + state[0])
        }))
    }

    /// Breaches of `|u| ≤ bound` and the slice Lipschitz bound.
    pub fn check_invariants(&self, bound: f64, lipschitz: f64) -> Vec<String> {
        let h = self.grid.h();
        let mut out = Vec::new();
        for (k, level) in self.values.iter().enumerate() {
            let m = level.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if m > bound * (1.0 + 1e-12) + 1e-12 {
                out.push(format!("level {k}: sup |u| = {m} exceeds {bound}"));
            }
            let lip = level
                .windows(2)
                .fold(0.0f64, |a, w| a.max((w[1] - w[0]).abs() / h));
            if lip > lipschitz * (1.0 + 1e-9) + 1e-12 {
                out.push(format!(
                    "level {k}: Lipschitz constant {lip} exceeds {lipschitz}"
                ));
            }
        }
        out
    }

    /// Rows `t, x, u, argmax_triple`.
    pub fn write_csv(&self, w: &mut impl Write) -> io::Result<()> {
        self.write_csv_every(w, 1)
    }

    /// `write_csv` restricted to every `stride`-th level (the last level is
    /// always written).
    pub fn write_csv_every(&self, w: &mut impl Write, stride: usize) -> io::Result<()> {
        let stride = stride.max(1);
        let last = self.times.len() - 1;
        writeln!(w, "t,x,u,argmax_triple")?;
        for (k, t) in self.times.iter().enumerate() {
            if k % stride != 0 && k != last {
                continue;
            }
            for j in 0..self.grid.nodes() {
                writeln!(
                    w,
                    "{},{},{},{}",
                    fmt12(*t),
                    fmt12(self.grid.x(j)),
                    fmt12(self.values[k][j]),
                    self.argmax[k][j]
                )?;
            }
        }
        Ok(())
    }

    pub(crate) fn from_parts(
        grid: SpatialGrid,
        times: Vec<f64>,
        values: Vec<Vec<f64>>,
        argmax: Vec<Vec<usize>>,
        convention: Convention,
    ) -> Self {
        Self {
            grid,
            times,
            values,
            argmax,
            convention,
        }
    }
}

/// Initial-convention fields (argmax of level k drives k → k+1) to terminal
/// ones (argmax of level k drives (t_k, t_{k+1}]).
fn to_terminal(u: GridFunction) -> GridFunction {
    let k = u.values.len() - 1;
    let argmax = (0..=k)
        .map(|l| u.argmax[if l < k { k - 1 - l } else { 0 }].clone())
        .collect();
    let mut values = u.values;
    values.reverse();
    GridFunction {
        grid: u.grid,
        times: u.times,
        values,
        argmax,
        convention: Convention::Terminal,
    }
}

/// Solves the integro-PDE for `u(t, ·) = Ê[φ(· + X_t)]` on `[0, T]`.
pub fn solve_pide(
    phi: &dyn Fn(f64) -> f64,
    horizon: f64,
    grid: SpatialGrid,
    steps: usize,
    set: &UncertaintySet,
    convention: Convention,
) -> Result<GridFunction> {
    solve_pide_with(&LevyDynamics, phi, horizon, grid, steps, set, convention)
}

/// `solve_pide` for arbitrary dynamics.
pub fn solve_pide_with(
    dynamics: &dyn Dynamics,
    phi: &dyn Fn(f64) -> f64,
    horizon: f64,
    grid: SpatialGrid,
    steps: usize,
    set: &UncertaintySet,
    convention: Convention,
) -> Result<GridFunction> {
    if !(horizon > 0.0) || steps == 0 {
        return Err(Error::InvalidGrid(format!(
            "need T > 0 and at least one step, got T = {horizon}, steps = {steps}"
        )));
    }
    let scheme = Scheme::new(set, grid, dynamics)?;
    let dt = horizon / steps as f64;
    scheme.check_cfl(dt)?;
    let u0 = sample_payoff(&grid, phi)?;
    let mut values = Vec::with_capacity(steps + 1);
    let mut argmax = Vec::with_capacity(steps + 1);
    values.push(u0);
    for k in 0..steps {
        let mut next = vec![0.0; grid.nodes()];
        argmax.push(scheme.advance(&values[k], dt, &mut next));
        values.push(next);
    }
    argmax.push(scheme.argmax(&values[steps]));
    let times = (0..=steps)
        .map(|k| if k == steps { horizon } else { k as f64 * dt })
        .collect();
    let initial = GridFunction::from_parts(grid, times, values, argmax, Convention::Initial);
    Ok(match convention {
        Convention::Initial => initial,
        Convention::Terminal => to_terminal(initial),
    })
}

/// Spatial grid plus the largest admissible time step for one-step solves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PideConfig {
    pub space: SpatialGrid,
    pub max_dt: f64,
}

impl PideConfig {
    pub fn new(space: SpatialGrid, max_dt: f64) -> Self {
        Self { space, max_dt }
    }

    /// Number of steps used to cover `duration`.
    pub fn steps_for(&self, duration: f64) -> usize {
        ((duration / self.max_dt) - 1e-9).ceil().max(1.0) as usize
    }
}

/// Advances node values `init` (as `u(0, ·)`) over `duration`.
pub fn propagate(
    init: &[f64],
    duration: f64,
    set: &UncertaintySet,
    cfg: &PideConfig,
) -> Result<Vec<f64>> {
    if init.len() != cfg.space.nodes() {
        return Err(Error::InvalidArgument(
            "initial slice does not match the grid".into(),
        ));
    }
    if let Some(j) = init.iter().position(|v| !v.is_finite()) {
        return Err(Error::UnboundedPayoff { x: cfg.space.x(j) });
    }
    let scheme = Scheme::new(set, cfg.space, &LevyDynamics)?;
    let steps = cfg.steps_for(duration);
    let dt = duration / steps as f64;
    scheme.check_cfl(dt)?;
    let mut u = init.to_vec();
    let mut next = vec![0.0; u.len()];
    for _ in 0..steps {
        scheme.advance(&u, dt, &mut next);
        std::mem::swap(&mut u, &mut next);
    }
    Ok(u)
}

/// One panel point of a dynamic programming check.
#[derive(Debug, Clone, PartialEq)]
pub struct DppPoint {
    pub t: f64,
    pub x: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub std_error: f64,
    pub residual: f64,
    pub tolerance: f64,
    pub argmax_control: usize,
}

impl DppPoint {
    pub fn passed(&self) -> bool {
        self.residual <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DppReport {
    pub h: f64,
    pub points: Vec<DppPoint>,
}

impl DppReport {
    pub fn max_residual(&self) -> f64 {
        self.points.iter().fold(0.0, |a, p| a.max(p.residual))
    }

    pub fn mean_residual(&self) -> f64 {
        let r: Vec<f64> = self.points.iter().map(|p| p.residual).collect();
        crate::batch::pairwise_sum(&r) / r.len().max(1) as f64
    }

    pub fn passed(&self) -> bool {
        self.points.iter().all(DppPoint::passed)
    }
}

/// Parameters of a dynamic programming check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DppSettings {
    pub h: f64,
    pub samples: usize,
    pub seed: u64,
    /// Constant `C` of the tolerance `3·se + C·(h² + Δx)`.
    pub constant: f64,
}

/// Compares `u(t, x)` with `max_θ E[u(t+h, x + B^{t,θ}_{t+h})]` on a panel.
/// `u` must be in the terminal convention; controls are applied from time `t`
/// with the path state measured from `x`.
pub fn check_dpp(
    u: &GridFunction,
    set: &UncertaintySet,
    controls: &[ControlPath],
    panel: &[(f64, f64)],
    settings: DppSettings,
) -> Result<DppReport> {
    if u.convention() != Convention::Terminal {
        return Err(Error::InvalidArgument(
            "check_dpp needs the terminal convention".into(),
        ));
    }
    let DppSettings {
        h,
        samples,
        seed,
        constant,
    } = settings;
    let dt = u.dt();
    let ratio = h / dt;
    if !(h > 0.0) || (ratio - ratio.round()).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "h = {h} is not a multiple of dt = {dt}"
        )));
    }
    let steps = ratio.round() as usize;
    let mut points = Vec::with_capacity(panel.len());
    for &(t, x) in panel {
        let k = u.level_index(t)?;
        if k + steps >= u.levels() {
            return Err(Error::OffGrid { time: t + h });
        }
        let lhs = u.level(k)[u.grid().node_index(x)?];
        let later = u.level(k + steps).to_vec();
        let grid = TimeGrid::new(u.times()[k], u.times()[k + steps], steps)?;
        let mc = MonteCarlo::new(set, grid, samples, seed)?;
        let g = *u.grid();
        let est = mc.upper(controls, |p| Ok(g.interpolate(&later, x + p.terminal()[0])))?;
        let residual = (lhs - est.value).abs();
        let tolerance = 3.0 * est.std_error + constant * (h * h + g.h());
        points.push(DppPoint {
            t,
            x,
            lhs,
            rhs: est.value,
            std_error: est.std_error,
            residual,
            tolerance,
            argmax_control: est.argmax_control,
        });
    }
    Ok(DppReport { h, points })
}

/// Interior residual at one panel point.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualPoint {
    pub t: f64,
    pub x: f64,
    pub residual: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    pub points: Vec<ResidualPoint>,
}

impl ResidualReport {
    pub fn max_residual(&self) -> f64 {
        self.points.iter().fold(0.0, |a, p| a.max(p.residual))
    }

    pub fn passed(&self) -> bool {
        self.points.iter().all(|p| p.residual <= p.tolerance)
    }
}

/// `|∂_τ u − max_i G_i u|` at panel points, with `τ` the time to maturity and
/// a centred difference in `τ` (one-sided at the ends). Tolerance `c·(Δt + h)`.
pub fn viscosity_residual(
    u: &GridFunction,
    set: &UncertaintySet,
    panel: &[(f64, f64)],
    c: f64,
) -> Result<ResidualReport> {
    let scheme = Scheme::new(set, *u.grid(), &LevyDynamics)?;
    let dt = u.dt();
    let last = u.levels() - 1;
    // index in initial (time-to-maturity) order
    let tau_level = |k: usize| match u.convention() {
        Convention::Initial => u.level(k),
        Convention::Terminal => u.level(last - k),
    };
    let mut points = Vec::with_capacity(panel.len());
    for &(t, x) in panel {
        let k = u.level_index(t)?;
        let j = u.grid().node_index(x)?;
        let kt = match u.convention() {
            Convention::Initial => k,
            Convention::Terminal => last - k,
        };
        let (lo, hi) = (kt.saturating_sub(1), (kt + 1).min(last));
        let dtau = (tau_level(hi)[j] - tau_level(lo)[j]) / ((hi - lo) as f64 * dt);
        let (g, _) = scheme.best(tau_level(kt), j, &|_| 0.0);
        points.push(ResidualPoint {
            t,
            x,
            residual: (dtau - g).abs(),
            tolerance: c * (dt + u.grid().h()),
        });
    }
    Ok(ResidualReport { points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uncertainty::JumpMeasure;

    fn vol_family() -> UncertaintySet {
        UncertaintySet::new(vec![
            LevyTriple::scalar(JumpMeasure::zero(1), 0.0, 0.5),
            LevyTriple::scalar(JumpMeasure::zero(1), 0.0, 1.0),
        ])
    }

    fn poisson() -> UncertaintySet {
        UncertaintySet::singleton(LevyTriple::scalar(
            JumpMeasure::scalar(&[(1.0, 1.0)]),
            0.0,
            0.0,
        ))
    }

    #[test]
    fn generator_examples() {
        let g = SpatialGrid::new(-2.0, 2.0, 41).unwrap();
        let affine: Vec<f64> = g.points();
        let quad: Vec<f64> = g.points().iter().map(|x| x * x).collect();
        let zero_q = LevyTriple::scalar(JumpMeasure::zero(1), 0.0, 0.0);
        let sigma = LevyTriple::scalar(JumpMeasure::zero(1), 0.0, 0.7);
        let jump = LevyTriple::scalar(JumpMeasure::scalar(&[(1.0, 1.0)]), 0.0, 0.0);
        assert!(apply_generator(&g, &affine, 20, &sigma).abs() < 1e-12);
        assert!((apply_generator(&g, &quad, 20, &sigma) - 0.49).abs() < 1e-12);
        assert!((apply_generator(&g, &affine, 20, &jump) - 1.0).abs() < 1e-12);
        assert_eq!(apply_generator(&g, &affine, 20, &zero_q), 0.0);
    }

    #[test]
    fn constant_extension_and_interpolation() {
        let g = SpatialGrid::new(0.0, 1.0, 3).unwrap();
        let v = [1.0, 2.0, 4.0];
        assert_eq!(g.interpolate(&v, -5.0), 1.0);
        assert_eq!(g.interpolate(&v, 5.0), 4.0);
        assert_eq!(g.interpolate(&v, 0.75), 3.0);
        assert_eq!(g.interpolate(&v, 1.0), 4.0);
    }

    #[test]
    fn cfl_is_enforced() {
        let g = SpatialGrid::new(-3.0, 3.0, 61).unwrap();
        let err = solve_pide(&|x| x * x, 1.0, g, 10, &vol_family(), Convention::Initial);
        assert!(matches!(err, Err(Error::Cfl { .. })));
        let err = solve_pide(
            &|x| 1.0 / x,
            1.0,
            g,
            200,
            &vol_family(),
            Convention::Initial,
        );
        assert!(matches!(err, Err(Error::UnboundedPayoff { .. })));
    }

    #[test]
    fn constants_and_affine_are_preserved() {
        let g = SpatialGrid::new(-4.0, 4.0, 81).unwrap();
        let c = solve_pide(&|_| 0.3, 0.5, g, 100, &vol_family(), Convention::Initial).unwrap();
        assert!(c.level(100).iter().all(|&v| v == 0.3));
        let a = solve_pide(&|x| x, 0.2, g, 30, &vol_family(), Convention::Initial).unwrap();
        assert!((a.value_at(0.2, 0.0).unwrap()).abs() < 1e-12);
        assert!((a.value_at(0.2, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn poisson_min_payoff() {
        let g = SpatialGrid::new(-1.0, 4.0, 51).unwrap();
        let u = solve_pide(
            &|x| x.min(2.0),
            1.0,
            g,
            100,
            &poisson(),
            Convention::Initial,
        )
        .unwrap();
        let oracle = 2.0 - 3.0 * (-1.0f64).exp();
        assert!((u.origin_value() - oracle).abs() < 0.02 * oracle);
    }

    #[test]
    fn volatility_worst_case() {
        let g = SpatialGrid::new(-6.0, 6.0, 121).unwrap();
        let u = solve_pide(&|x| x * x, 1.0, g, 200, &vol_family(), Convention::Terminal).unwrap();
        assert!((u.origin_value() - 1.0).abs() < 0.02);
        assert!(u.argmax(0)[60] == 1);
    }

    #[test]
    fn conventions_are_time_reversals() {
        let g = SpatialGrid::new(-1.0, 4.0, 26).unwrap();
        let a = solve_pide(&|x| x.min(2.0), 1.0, g, 20, &poisson(), Convention::Initial).unwrap();
        let b = solve_pide(
            &|x| x.min(2.0),
            1.0,
            g,
            20,
            &poisson(),
            Convention::Terminal,
        )
        .unwrap();
        assert_eq!(a.level(20), b.level(0));
        assert_eq!(a.level(0), b.level(20));
        assert_eq!(a.argmax(0), b.argmax(19));
    }

    #[test]
    fn propagate_matches_solver() {
        let g = SpatialGrid::new(-1.0, 4.0, 51).unwrap();
        let u = solve_pide(&|x| x.min(2.0), 1.0, g, 20, &poisson(), Convention::Initial).unwrap();
        let init = sample_payoff(&g, &|x| x.min(2.0)).unwrap();
        let p = propagate(&init, 1.0, &poisson(), &PideConfig::new(g, 0.05)).unwrap();
        assert_eq!(p, u.level(20));
    }

    #[test]
    fn covering_grid() {
        let g = SpatialGrid::covering(0.0, 1.0, 2.0, 0.1).unwrap();
        assert!((g.x_min() + 3.0).abs() < 1e-12);
        assert!((g.x_max() - 4.0).abs() < 1e-12);
        assert!((g.h() - 0.1).abs() < 1e-12);
        assert_eq!(g.node_index(0.0).unwrap(), 30);
    }

    #[test]
    fn csv_has_all_nodes() {
        let g = SpatialGrid::new(0.0, 1.0, 3).unwrap();
        let u = solve_pide(&|x| x, 1.0, g, 2, &poisson(), Convention::Initial).unwrap();
        let mut buf = Vec::new();
        u.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 1 + 3 * 3);
        assert!(s.starts_with("t,x,u,argmax_triple\n0,0,0,0\n"));
    }

    #[test]
    fn affine_residual_vanishes() {
        let g = SpatialGrid::new(-4.0, 4.0, 81).unwrap();
        let set = UncertaintySet::singleton(LevyTriple::scalar(JumpMeasure::zero(1), 0.0, 0.5));
        let u = solve_pide(&|x| x, 0.1, g, 10, &set, Convention::Terminal).unwrap();
        let r = viscosity_residual(&u, &set, &[(0.05, 0.0), (0.0, 1.0)], 1.0).unwrap();
        assert!(r.max_residual() < 1e-9);
    }
}
