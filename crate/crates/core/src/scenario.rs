//! Simulation of controlled Lévy–Itô integrals on a time grid.
//!
//! A scenario is driven by a unit-rate Poisson clock with uniform marks on
//! `(0, 1]` and by a Brownian motion with one Gaussian increment per grid
//! step. At every step the control picks a triple `(v, p, Q)`; arrivals in the
//! step jump by `g_v(mark)` and the continuous part advances by
//! `p dt + Q dW`. Arrivals whose mark falls in the zero cell of `g_v` are
//! thinned away and leave no trace on the path.

use std::fmt;
use std::io::{self, Write};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::batch::{replicate_rng, GAUSSIAN_LANE, JUMP_LANE};
use crate::csvfmt::fmt12;
use crate::error::{Error, Result};
use crate::uncertainty::{build_transport_map, TransportMap, UncertaintySet};

/// Uniform grid `t_k = t0 + k (t_end - t0) / steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    t_end: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidGrid(
                "time grid needs at least one step".into(),
            ));
        }
        if !(t0.is_finite() && t_end.is_finite()) || t_end <= t0 {
            return Err(Error::InvalidGrid(format!(
                "time grid needs t0 < T, got [{t0}, {t_end}]"
            )));
        }
        Ok(Self { t0, t_end, steps })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn horizon(&self) -> f64 {
        self.t_end - self.t0
    }

    pub fn dt(&self) -> f64 {
        self.horizon() / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.t_end
        } else {
            self.t0 + self.horizon() * k as f64 / self.steps as f64
        }
    }

    /// Index of the node at time `t`; fails unless `t` is a node up to 1e-9 steps.
    pub fn node_index(&self, t: f64) -> Result<usize> {
        let x = (t - self.t0) / self.dt();
        let k = x.round();
        if !(0.0..=self.steps as f64).contains(&k) || (x - k).abs() > 1e-9 {
            return Err(Error::OffGrid { time: t });
        }
        Ok(k as usize)
    }

    /// Step `k` such that `t` lies in `(t_k, t_{k+1}]`.
    pub fn step_containing(&self, t: f64) -> Option<usize> {
        if t <= self.t0 || t > self.t_end {
            return None;
        }
        let x = (t - self.t0) / self.dt();
        let mut k = x.ceil() as usize;
        k = k.clamp(1, self.steps);
        Some(k - 1)
    }
}

/// Rule mapping `(time, current state)` to a triple index.
pub type FeedbackRule = Arc<dyn Fn(f64, &[f64]) -> usize + Send + Sync>;

#[derive(Clone)]
pub enum ControlRule {
    /// The same triple on every step.
    Constant(usize),
    /// One triple per grid step.
    PerStep(Vec<usize>),
    /// `indices[0]` before `switch_times[0]`, `indices[i]` on
    /// `[switch_times[i-1], switch_times[i])`.
    Piecewise {
        switch_times: Vec<f64>,
        indices: Vec<usize>,
    },
    /// Reads the left-limit state at the start of each step.
    Feedback(FeedbackRule),
}

impl fmt::Debug for ControlRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant(i) => f.debug_tuple("Constant").field(i).finish(),
            Self::PerStep(v) => f.debug_tuple("PerStep").field(v).finish(),
            Self::Piecewise {
                switch_times,
                indices,
            } => f
                .debug_struct("Piecewise")
                .field("switch_times", switch_times)
                .field("indices", indices)
                .finish(),
            Self::Feedback(_) => f.write_str("Feedback(..)"),
        }
    }
}

/// An admissible control: a labelled selection rule over the triples of a set.
#[derive(Debug, Clone)]
pub struct ControlPath {
    label: String,
    rule: ControlRule,
}

impl ControlPath {
    pub fn new(label: impl Into<String>, rule: ControlRule) -> Self {
        Self {
            label: label.into(),
            rule,
        }
    }

    pub fn constant(index: usize) -> Self {
        Self::new(format!("const-{index}"), ControlRule::Constant(index))
    }

    pub fn feedback(
        label: impl Into<String>,
        rule: impl Fn(f64, &[f64]) -> usize + Send + Sync + 'static,
    ) -> Self {
        Self::new(label, ControlRule::Feedback(Arc::new(rule)))
    }

    /// One constant control per triple of `set`.
    pub fn all_constants(set: &UncertaintySet) -> Vec<Self> {
        (0..set.len()).map(Self::constant).collect()
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn rule(&self) -> &ControlRule {
        &self.rule
    }

    /// Checks the deterministic parts of the rule against `set` and `grid`.
    pub fn check(&self, set: &UncertaintySet, grid: &TimeGrid) -> Result<()> {
        let len = set.len();
        let in_range = |index: usize| {
            if index < len {
                Ok(())
            } else {
                Err(Error::ControlOutOfRange { index, len })
            }
        };
        match &self.rule {
            ControlRule::Constant(i) => in_range(*i),
            ControlRule::PerStep(v) => {
                if v.len() != grid.steps() {
                    return Err(Error::InvalidArgument(format!(
                        "control `{}` has {} entries for {} steps",
                        self.label,
                        v.len(),
                        grid.steps()
                    )));
                }
                v.iter().try_for_each(|&i| in_range(i))
            }
            ControlRule::Piecewise {
                switch_times,
                indices,
            } => {
                if indices.len() != switch_times.len() + 1 {
                    return Err(Error::InvalidArgument(format!(
                        "control `{}` needs one more index than switch times",
                        self.label
                    )));
                }
                if switch_times.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::InvalidArgument(format!(
                        "control `{}` switch times must increase",
                        self.label
                    )));
                }
                indices.iter().try_for_each(|&i| in_range(i))
            }
            ControlRule::Feedback(_) => Ok(()),
        }
    }

    /// Triple index for step `k` starting at time `t` in state `state`.
    pub fn select(&self, k: usize, t: f64, state: &[f64]) -> usize {
        match &self.rule {
            ControlRule::Constant(i) => *i,
            ControlRule::PerStep(v) => v[k],
            ControlRule::Piecewise {
                switch_times,
                indices,
            } => {
                let n = switch_times.partition_point(|&s| s <= t + 1e-12);
                indices[n]
            }
            ControlRule::Feedback(f) => f(t, state),
        }
    }
}

/// One realized jump of the path.
#[derive(Debug, Clone, PartialEq)]
pub struct Jump {
    pub time: f64,
    pub mark: f64,
    pub size: Vec<f64>,
    /// Grid step `k` with `time` in `(t_k, t_{k+1}]`.
    pub step: usize,
}

/// One simulated trajectory with its jump ledger and quadratic variation.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioPath {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
    qv: Vec<f64>,
    drift: Vec<f64>,
    diffusion: Vec<f64>,
    selected: Vec<usize>,
    jumps: Vec<Jump>,
    seed: u64,
    replicate: u64,
}

impl ScenarioPath {
    /// Pure-jump path with the given `(time, size)` jumps (sorted by time)
    /// and no continuous part; useful as a fixture.
    pub fn from_jumps(grid: TimeGrid, dim: usize, jumps: &[(f64, Vec<f64>)]) -> Result<Self> {
        let steps = grid.steps();
        let mut ledger = Vec::with_capacity(jumps.len());
        for (time, size) in jumps {
            if size.len() != dim {
                return Err(Error::InvalidArgument(
                    "jump size has the wrong dimension".into(),
                ));
            }
            let step = grid.step_containing(*time).ok_or_else(|| {
                Error::InvalidArgument(format!("jump time {time} is outside the grid"))
            })?;
            if ledger.last().is_some_and(|j: &Jump| j.time > *time) {
                return Err(Error::InvalidArgument("jump times must be sorted".into()));
            }
            ledger.push(Jump {
                time: *time,
                mark: f64::NAN,
                size: size.clone(),
                step,
            });
        }
        let mut values = vec![0.0; dim];
        for k in 0..steps {
            let mut next = values[k * dim..(k + 1) * dim].to_vec();
            for j in ledger.iter().filter(|j| j.step == k) {
                next.iter_mut().zip(&j.size).for_each(|(v, z)| *v += z);
            }
            values.extend(next);
        }
        Ok(Self {
            grid,
            dim,
            values,
            qv: vec![0.0; grid.nodes() * dim * dim],
            drift: vec![0.0; steps * dim],
            diffusion: vec![0.0; steps * dim],
            selected: vec![0; steps],
            jumps: ledger,
            seed: 0,
            replicate: 0,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn replicate(&self) -> u64 {
        self.replicate
    }

    pub fn jumps(&self) -> &[Jump] {
        &self.jumps
    }

    /// Triple index chosen on each step.
    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    /// Post-jump value at node `k`.
    pub fn value(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn terminal(&self) -> &[f64] {
        self.value(self.grid.steps())
    }

    pub fn value_at(&self, t: f64) -> Result<&[f64]> {
        Ok(self.value(self.grid.node_index(t)?))
    }

    /// `p dt` on step `k`.
    pub fn drift_increment(&self, k: usize) -> &[f64] {
        &self.drift[k * self.dim..(k + 1) * self.dim]
    }

    /// `Q dW` on step `k`.
    pub fn diffusion_increment(&self, k: usize) -> &[f64] {
        &self.diffusion[k * self.dim..(k + 1) * self.dim]
    }

    /// Continuous increment `p dt + Q dW` of step `k`.
    pub fn continuous_increment(&self, k: usize) -> Vec<f64> {
        self.drift_increment(k)
            .iter()
            .zip(self.diffusion_increment(k))
            .map(|(a, b)| a + b)
            .collect()
    }

    /// Accumulated `<B>` at node `k`, row-major `d x d`.
    pub fn qv(&self, k: usize) -> &[f64] {
        let dd = self.dim * self.dim;
        &self.qv[k * dd..(k + 1) * dd]
    }

    /// `<B>_{t_{k+1}} - <B>_{t_k}`.
    pub fn qv_increment(&self, k: usize) -> Vec<f64> {
        self.qv(k + 1)
            .iter()
            .zip(self.qv(k))
            .map(|(a, b)| a - b)
            .collect()
    }

    /// `X_t - X_s` for grid nodes `s < t`.
    pub fn increment(&self, s: f64, t: f64) -> Result<Vec<f64>> {
        let (i, j) = (self.grid.node_index(s)?, self.grid.node_index(t)?);
        if i >= j {
            return Err(Error::InvalidArgument(format!(
                "increment needs s < t, got s = {s}, t = {t}"
            )));
        }
        Ok(self
            .value(j)
            .iter()
            .zip(self.value(i))
            .map(|(a, b)| a - b)
            .collect())
    }

    /// `<B>_t` at grid node `t`.
    pub fn quadratic_variation(&self, t: f64) -> Result<&[f64]> {
        Ok(self.qv(self.grid.node_index(t)?))
    }

    /// Jumps with time in `(s, t]`.
    pub fn jumps_between(&self, s: f64, t: f64) -> impl Iterator<Item = &Jump> {
        self.jumps.iter().filter(move |j| j.time > s && j.time <= t)
    }

    /// Jumps registered on step `k`.
    pub fn jumps_in_step(&self, k: usize) -> &[Jump] {
        let lo = self.jumps.partition_point(|j| j.step < k);
        let hi = self.jumps.partition_point(|j| j.step <= k);
        &self.jumps[lo..hi]
    }

    /// Largest `|ΔX - drift - diffusion - Σ jumps|` over all steps and components.
    pub fn decomposition_residual(&self) -> f64 {
        let d = self.dim;
        let mut worst: f64 = 0.0;
        for k in 0..self.grid.steps() {
            let jumps = self.jumps_in_step(k);
            for c in 0..d {
                let js: f64 = jumps.iter().map(|j| j.size[c]).sum();
                let inc = self.value(k + 1)[c] - self.value(k)[c];
                let r = inc - self.drift_increment(k)[c] - self.diffusion_increment(k)[c] - js;
                worst = worst.max(r.abs());
            }
        }
        worst
    }

    /// CSV export: `time, x0.., qv00.., jump`, one row per node.
    pub fn write_csv(&self, w: &mut impl Write) -> io::Result<()> {
        let d = self.dim;
        let mut header = vec!["time".to_string()];
        header.extend((0..d).map(|i| format!("x{i}")));
        for i in 0..d {
            for j in 0..d {
                header.push(format!("qv{i}{j}"));
            }
        }
        header.push("jump".into());
        writeln!(w, "{}", header.join(","))?;
        for k in 0..self.grid.nodes() {
            let mut row = vec![fmt12(self.grid.time(k))];
            row.extend(self.value(k).iter().map(|&x| fmt12(x)));
            row.extend(self.qv(k).iter().map(|&x| fmt12(x)));
            let flag = k > 0 && !self.jumps_in_step(k - 1).is_empty();
            row.push(if flag { "1" } else { "0" }.into());
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Precomputed transport maps for one uncertainty set on one grid.
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    set: &'a UncertaintySet,
    maps: Vec<TransportMap>,
    grid: TimeGrid,
}

impl<'a> Simulator<'a> {
    pub fn new(set: &'a UncertaintySet, grid: TimeGrid) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::InvalidSet("empty uncertainty set".into()));
        }
        let maps = set
            .triples()
            .iter()
            .map(|t| build_transport_map(&t.measure))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { set, maps, grid })
    }

    pub fn set(&self) -> &UncertaintySet {
        self.set
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn maps(&self) -> &[TransportMap] {
        &self.maps
    }

    /// Step-by-step simulation where the caller picks the triple of each step.
    pub fn stepper(&self, seed: u64, replicate: u64) -> Stepper<'_> {
        Stepper::new(self, seed, replicate)
    }

    /// Full path under `control`; feedback rules read the current value of `B`.
    pub fn path(&self, control: &ControlPath, seed: u64, replicate: u64) -> Result<ScenarioPath> {
        let mut st = self.stepper(seed, replicate);
        for k in 0..self.grid.steps() {
            let i = control.select(k, self.grid.time(k), st.state());
            st.step(i)?;
        }
        Ok(st.finish())
    }
}

/// Incremental path builder; randomness is fixed by `(seed, replicate)` and
/// does not depend on the triples chosen.
pub struct Stepper<'s> {
    sim: &'s Simulator<'s>,
    arrivals: Vec<(f64, f64)>,
    next: usize,
    gauss: ChaCha8Rng,
    path: ScenarioPath,
    k: usize,
    dw: Vec<f64>,
}

impl<'s> Stepper<'s> {
    fn new(sim: &'s Simulator<'s>, seed: u64, replicate: u64) -> Self {
        let grid = sim.grid;
        let d = sim.set.dim();
        let mut jr = replicate_rng(seed, replicate, JUMP_LANE);
        let mut arrivals = Vec::new();
        let mut t = grid.t0();
        loop {
            let e: f64 = -(1.0 - jr.random::<f64>()).ln();
            t += e;
            if t > grid.t_end() {
                break;
            }
            let mark = 1.0 - jr.random::<f64>();
            arrivals.push((t, mark));
        }
        let nodes = grid.nodes();
        let path = ScenarioPath {
            grid,
            dim: d,
            values: Vec::with_capacity(nodes * d),
            qv: Vec::with_capacity(nodes * d * d),
            drift: Vec::with_capacity(grid.steps() * d),
            diffusion: Vec::with_capacity(grid.steps() * d),
            selected: Vec::with_capacity(grid.steps()),
            jumps: Vec::new(),
            seed,
            replicate,
        };
        let mut st = Self {
            sim,
            arrivals,
            next: 0,
            gauss: replicate_rng(seed, replicate, GAUSSIAN_LANE),
            path,
            k: 0,
            dw: vec![0.0; d],
        };
        st.path.values.extend(std::iter::repeat_n(0.0, d));
        st.path.qv.extend(std::iter::repeat_n(0.0, d * d));
        st
    }

    /// Index of the next step to simulate.
    pub fn current_step(&self) -> usize {
        self.k
    }

    pub fn is_done(&self) -> bool {
        self.k == self.sim.grid.steps()
    }

    /// Current post-jump value.
    pub fn state(&self) -> &[f64] {
        self.path.value(self.k)
    }

    /// Path built so far.
    pub fn path(&self) -> &ScenarioPath {
        &self.path
    }

    /// Advances one grid step under triple `triple`.
    pub fn step(&mut self, triple: usize) -> Result<()> {
        let grid = self.sim.grid;
        if self.is_done() {
            return Err(Error::InvalidArgument("stepper already reached T".into()));
        }
        let tr = self.sim.set.triple(triple)?;
        let map = &self.sim.maps[triple];
        let d = self.path.dim;
        let k = self.k;
        let dt = grid.dt();
        let t_next = grid.time(k + 1);

        let sq = dt.sqrt();
        for w in self.dw.iter_mut() {
            let z: f64 = self.gauss.sample(StandardNormal);
            *w = sq * z;
        }

        let mut jump_sum = vec![0.0; d];
        while self.next < self.arrivals.len() && self.arrivals[self.next].0 <= t_next {
            let (time, mark) = self.arrivals[self.next];
            self.next += 1;
            let size = map.eval(mark);
            if size.iter().all(|&x| x == 0.0) {
                continue;
            }
            for c in 0..d {
                jump_sum[c] += size[c];
            }
            self.path.jumps.push(Jump {
                time,
                mark,
                size: size.to_vec(),
                step: k,
            });
        }

        for c in 0..d {
            let drift = tr.drift[c] * dt;
            let mut diff = 0.0;
            for j in 0..d {
                diff += tr.vol[c * d + j] * self.dw[j];
            }
            self.path.drift.push(drift);
            self.path.diffusion.push(diff);
            let prev = self.path.values[k * d + c];
            self.path.values.push(prev + (drift + diff + jump_sum[c]));
        }
        let cov = tr.covariance();
        for (idx, c) in cov.iter().enumerate() {
            let prev = self.path.qv[k * d * d + idx];
            self.path.qv.push(prev + c * dt);
        }
        self.path.selected.push(triple);
        self.k += 1;
        Ok(())
    }

    /// Finishes the path; panics if steps remain.
    pub fn finish(self) -> ScenarioPath {
        assert!(self.is_done(), "stepper finished before reaching T");
        self.path
    }
}

/// One scenario under `control`; identical inputs give identical paths.
pub fn simulate(
    set: &UncertaintySet,
    control: &ControlPath,
    grid: &TimeGrid,
    seed: u64,
) -> Result<ScenarioPath> {
    control.check(set, grid)?;
    let sim = Simulator::new(set, *grid)?;
    sim.path(control, seed, 0)
}

/// `X_t - X_s` on grid nodes.
pub fn increment(path: &ScenarioPath, s: f64, t: f64) -> Result<Vec<f64>> {
    path.increment(s, t)
}

/// `<B>_t` on a grid node.
pub fn quadratic_variation(path: &ScenarioPath, t: f64) -> Result<Vec<f64>> {
    path.quadratic_variation(t).map(<[f64]>::to_vec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uncertainty::{JumpMeasure, LevyTriple};

    fn poisson_set() -> UncertaintySet {
        UncertaintySet::singleton(LevyTriple::scalar(
            JumpMeasure::scalar(&[(1.0, 1.0)]),
            0.0,
            0.0,
        ))
    }

    #[test]
    fn grid_nodes() {
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        assert_eq!(g.node_index(0.3).unwrap(), 3);
        assert_eq!(g.node_index(1.0).unwrap(), 10);
        assert!(matches!(g.node_index(0.35), Err(Error::OffGrid { .. })));
        assert_eq!(g.step_containing(0.3), Some(2));
        assert_eq!(g.step_containing(0.31), Some(3));
        assert_eq!(g.step_containing(0.0), None);
        assert!(TimeGrid::new(1.0, 1.0, 3).is_err());
    }

    #[test]
    fn zero_measure_path_is_identically_zero() {
        let set = UncertaintySet::singleton(LevyTriple::scalar(JumpMeasure::zero(1), 0.0, 0.0));
        let g = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let p = simulate(&set, &ControlPath::constant(0), &g, 3).unwrap();
        assert!((0..g.nodes()).all(|k| p.value(k)[0] == 0.0));
        assert!(p.jumps().is_empty());
    }

    #[test]
    fn deterministic_given_seed() {
        let set = poisson_set();
        let g = TimeGrid::new(0.0, 2.0, 40).unwrap();
        let a = simulate(&set, &ControlPath::constant(0), &g, 11).unwrap();
        let b = simulate(&set, &ControlPath::constant(0), &g, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unit_jumps_count_arrivals() {
        let set = poisson_set();
        let g = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let p = simulate(&set, &ControlPath::constant(0), &g, 5).unwrap();
        assert_eq!(p.terminal()[0], p.jumps().len() as f64);
        for j in p.jumps() {
            let k = j.step;
            assert!(j.time > g.time(k) && j.time <= g.time(k + 1));
        }
    }

    #[test]
    fn increments_telescope() {
        let set = poisson_set();
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let p = simulate(&set, &ControlPath::constant(0), &g, 9).unwrap();
        assert_eq!(p.increment(0.0, 1.0).unwrap(), p.terminal().to_vec());
        let a = p.increment(0.0, 0.4).unwrap()[0] + p.increment(0.4, 1.0).unwrap()[0];
        assert_eq!(a, p.terminal()[0]);
        assert!(p.increment(0.5, 0.5).is_err());
        assert!(p.increment(0.05, 0.5).is_err());
    }

    #[test]
    fn qv_constant_and_piecewise() {
        let sig = |s: f64| LevyTriple::scalar(JumpMeasure::zero(1), 0.0, s);
        let set = UncertaintySet::new(vec![sig(0.5), sig(1.0)]);
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let p = simulate(&set, &ControlPath::constant(0), &g, 1).unwrap();
        assert!((p.quadratic_variation(0.6).unwrap()[0] - 0.25 * 0.6).abs() < 1e-12);
        let pw = ControlPath::new(
            "halves",
            ControlRule::Piecewise {
                switch_times: vec![0.5],
                indices: vec![0, 1],
            },
        );
        let p = simulate(&set, &pw, &g, 1).unwrap();
        assert!((p.quadratic_variation(1.0).unwrap()[0] - 0.625).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_feedback_errors() {
        let set = poisson_set();
        let g = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let bad = ControlPath::feedback("bad", |_, _| 3);
        assert!(matches!(
            simulate(&set, &bad, &g, 0),
            Err(Error::ControlOutOfRange { index: 3, len: 1 })
        ));
        assert!(simulate(&set, &ControlPath::constant(2), &g, 0).is_err());
    }

    #[test]
    fn csv_has_one_row_per_node() {
        let set = poisson_set();
        let g = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let p = simulate(&set, &ControlPath::constant(0), &g, 0).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "time,x0,qv00,jump");
        assert_eq!(lines.len(), 6);
    }
}
