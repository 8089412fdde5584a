//! Pathwise jump-Itô calculus: the jump random measure, Itô integrals of
//! simple jump integrands, the integrand norms and the continuity bound,
//! left-point integrals against `dB`, `ds` and `d<B>`, and the Itô formula
//! residual for G-Itô-Lévy processes.
//!
//! Everything here is a functional of one `ScenarioPath`. Monte Carlo
//! quantities go through `sublinear::MonteCarlo`, so they share its random
//! streams and its upper-expectation semantics.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scenario::{ControlPath, ScenarioPath, TimeGrid};
use crate::sublinear::{CylinderFunctional, Estimate, MonteCarlo, Phi};
use crate::uncertainty::UncertaintySet;

pub type SizePredicate = Arc<dyn Fn(&[f64]) -> bool + Send + Sync>;

/// Set of jump sizes `A ⊂ R^d \ {0}`.
#[derive(Clone)]
pub enum SizeSet {
    /// All nonzero sizes.
    All,
    /// A single size, matched exactly.
    Point(Vec<f64>),
    /// The box `[lo, hi)` componentwise.
    Box {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    Custom(SizePredicate),
}

impl fmt::Debug for SizeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::All => f.write_str("All"),
            Self::Point(p) => f.debug_tuple("Point").field(p).finish(),
            Self::Box { lo, hi } => f
                .debug_struct("Box")
                .field("lo", lo)
                .field("hi", hi)
                .finish(),
            Self::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl SizeSet {
    pub fn contains(&self, z: &[f64]) -> bool {
        if z.iter().all(|&c| c == 0.0) {
            return false;
        }
        match self {
            Self::All => true,
            Self::Point(p) => p.as_slice() == z,
            Self::Box { lo, hi } => z
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(&c, (&a, &b))| c >= a && c < b),
            Self::Custom(f) => f(z),
        }
    }
}

/// `X(]s,t], A)`: number of jumps of the path in `]s,t]` with size in `A`.
pub fn jump_measure_count(path: &ScenarioPath, s: f64, t: f64, set: &SizeSet) -> usize {
    path.jumps_between(s, t)
        .filter(|j| set.contains(&j.size))
        .count()
}

/// Bounded Lipschitz function of the jump size with `ψ(0) = 0`.
#[derive(Clone)]
pub struct Kernel {
    label: String,
    f: Phi,
    /// Declared support of the first size coordinate, `None` for everywhere.
    support: Option<(f64, f64)>,
}

impl fmt::Debug for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Kernel")
            .field("label", &self.label)
            .field("support", &self.support)
            .finish_non_exhaustive()
    }
}

impl Kernel {
    pub fn custom(
        label: impl Into<String>,
        support: Option<(f64, f64)>,
        f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            label: label.into(),
            f: Arc::new(f),
            support,
        }
    }

    /// `ψ(z) = slope · z_0`.
    pub fn linear(slope: f64) -> Self {
        Self::custom(format!("linear({slope})"), None, move |z| slope * z[0])
    }

    /// Tent of the given height on `[center - half_width, center + half_width]`.
    pub fn tent(center: f64, half_width: f64, height: f64) -> Self {
        Self::custom(
            format!("tent({center},{half_width},{height})"),
            Some((center - half_width, center + half_width)),
            move |z| height * (1.0 - (z[0] - center).abs() / half_width).max(0.0),
        )
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn support(&self) -> Option<(f64, f64)> {
        self.support
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        (self.f)(z)
    }

    pub fn scaled(&self, lambda: f64) -> Self {
        let f = self.f.clone();
        Self {
            label: format!("{lambda}*{}", self.label),
            f: Arc::new(move |z| lambda * f(z)),
            support: self.support,
        }
    }
}

/// `K(u, z) = Σ_k Σ_l F_{k,l} 1_{]t_k, t_{k+1}]}(u) ψ_l(z)`.
#[derive(Debug, Clone)]
pub struct SimpleIntegrand {
    dim: usize,
    partition: Vec<f64>,
    kernels: Vec<Kernel>,
    /// `coefficients[k][l]`, observed at or before `partition[k]`.
    coefficients: Vec<Vec<CylinderFunctional>>,
}

/// Points per unit length used to sample kernel supports.
const SUPPORT_SAMPLES: usize = 2001;

impl SimpleIntegrand {
    pub fn new(
        dim: usize,
        partition: Vec<f64>,
        kernels: Vec<Kernel>,
        coefficients: Vec<Vec<CylinderFunctional>>,
    ) -> Result<Self> {
        if partition.len() < 2 || partition[0] < 0.0 || partition.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "partition must be increasing, nonnegative and have 2+ points: {partition:?}"
            )));
        }
        if coefficients.len() != partition.len() - 1
            || coefficients.iter().any(|row| row.len() != kernels.len())
        {
            return Err(Error::InvalidArgument(
                "need one coefficient per (interval, kernel)".into(),
            ));
        }
        let zero = vec![0.0; dim];
        for k in &kernels {
            let v = k.eval(&zero);
            if v != 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "kernel {} has ψ(0) = {v}",
                    k.label
                )));
            }
        }
        for (k, row) in coefficients.iter().enumerate() {
            for f in row {
                if f.arity() > 0
                    && (f.dim() != dim || f.times()[f.arity() - 1] > partition[k] + 1e-12)
                {
                    return Err(Error::InvalidArgument(format!(
                        "coefficient on interval {k} is not observed by time {}",
                        partition[k]
                    )));
                }
            }
        }
        Ok(Self {
            dim,
            partition,
            kernels,
            coefficients,
        })
    }

    /// Deterministic integrand `ψ(z)` on `]t0, t1]`.
    pub fn deterministic(t0: f64, t1: f64, kernel: Kernel) -> Result<Self> {
        Self::new(
            1,
            vec![t0, t1],
            vec![kernel],
            vec![vec![CylinderFunctional::constant(1.0)]],
        )
    }

    /// The zero integrand on `]t0, t1]`.
    pub fn zero(t0: f64, t1: f64) -> Result<Self> {
        Self::deterministic(t0, t1, Kernel::custom("zero", Some((0.0, 0.0)), |_| 0.0))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn partition(&self) -> &[f64] {
        &self.partition
    }

    pub fn kernels(&self) -> &[Kernel] {
        &self.kernels
    }

    pub fn coefficients(&self) -> &[Vec<CylinderFunctional>] {
        &self.coefficients
    }

    /// `λ K`.
    pub fn scaled(&self, lambda: f64) -> Self {
        Self {
            dim: self.dim,
            partition: self.partition.clone(),
            kernels: self.kernels.iter().map(|k| k.scaled(lambda)).collect(),
            coefficients: self.coefficients.clone(),
        }
    }

    /// `K₁ + K₂` on a common partition (kernels and coefficients are
    /// concatenated interval by interval).
    pub fn sum(&self, other: &Self) -> Result<Self> {
        if self.partition != other.partition || self.dim != other.dim {
            return Err(Error::InvalidArgument(
                "sum needs identical partitions".into(),
            ));
        }
        let mut kernels = self.kernels.clone();
        kernels.extend(other.kernels.iter().cloned());
        let coefficients = self
            .coefficients
            .iter()
            .zip(&other.coefficients)
            .map(|(a, b)| a.iter().chain(b).cloned().collect())
            .collect();
        Ok(Self {
            dim: self.dim,
            partition: self.partition.clone(),
            kernels,
            coefficients,
        })
    }

    /// Sampled check of pairwise support disjointness on `[-reach, reach]`;
    /// returns the offending kernel pairs.
    pub fn support_overlaps(&self, reach: f64) -> Vec<(usize, usize)> {
        let n = SUPPORT_SAMPLES;
        let mut out = Vec::new();
        let mut z = vec![0.0; self.dim];
        for a in 0..self.kernels.len() {
            for b in a + 1..self.kernels.len() {
                let clash = (0..n).any(|i| {
                    z[0] = -reach + 2.0 * reach * i as f64 / (n - 1) as f64;
                    self.kernels[a].eval(&z) != 0.0 && self.kernels[b].eval(&z) != 0.0
                });
                if clash {
                    out.push((a, b));
                }
            }
        }
        out
    }

    /// Evaluates the coefficients on `path`.
    pub fn bind(&self, path: &ScenarioPath) -> Result<BoundIntegrand<'_>> {
        let coeff = self
            .coefficients
            .iter()
            .map(|row| {
                row.iter()
                    .map(|f| f.eval_path(path))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundIntegrand {
            integrand: self,
            coeff,
        })
    }
}

/// A simple integrand with its coefficients fixed along one path.
pub struct BoundIntegrand<'a> {
    integrand: &'a SimpleIntegrand,
    coeff: Vec<Vec<f64>>,
}

impl BoundIntegrand<'_> {
    /// Interval `k` with `u ∈ ]t_k, t_{k+1}]`.
    fn interval(&self, u: f64) -> Option<usize> {
        let p = &self.integrand.partition;
        if u <= p[0] || u > p[p.len() - 1] {
            return None;
        }
        Some(p.partition_point(|&t| t < u) - 1)
    }

    pub fn eval(&self, u: f64, z: &[f64]) -> f64 {
        match self.interval(u) {
            None => 0.0,
            Some(k) => self
                .integrand
                .kernels
                .iter()
                .zip(&self.coeff[k])
                .map(|(psi, c)| c * psi.eval(z))
                .sum(),
        }
    }

    /// `∫_0^T sup_v ∫ |K(u,z)|^p v(dz) du`, exact for piecewise-constant `K`.
    pub fn sup_moment(&self, set: &UncertaintySet, p: u32) -> f64 {
        let part = &self.integrand.partition;
        let mut total = 0.0;
        for k in 0..part.len() - 1 {
            let mid = 0.5 * (part[k] + part[k + 1]);
            let best = set
                .triples()
                .iter()
                .map(|tr| {
                    tr.measure
                        .atoms()
                        .iter()
                        .map(|a| a.weight * self.eval(mid, &a.location).abs().powi(p as i32))
                        .sum::<f64>()
                })
                .fold(0.0, f64::max);
            total += (part[k + 1] - part[k]) * best;
        }
        total
    }
}

/// `∫_s^t ∫ K(u,z) X(du,dz)`: sum of `K(u, ΔX_u)` over jumps in `]s,t]`.
pub fn ito_jump_integral(k: &SimpleIntegrand, path: &ScenarioPath, s: f64, t: f64) -> Result<f64> {
    let bound = k.bind(path)?;
    Ok(path
        .jumps_between(s, t)
        .map(|j| bound.eval(j.time, &j.size))
        .sum())
}

/// Estimated `‖K‖_p` with the standard error of its `p`-th power.
#[derive(Debug, Clone, PartialEq)]
pub struct NormEstimate {
    pub p: u32,
    pub norm: f64,
    /// `Ê[∫ sup_v ∫ |K|^p v(dz) du]`.
    pub power: Estimate,
}

/// `Ê[∫_0^T sup_v ∫ |K(u,z)|^p v(dz) du]^{1/p}` for `p ∈ {1, 2}`.
pub fn integrand_norm(
    k: &SimpleIntegrand,
    p: u32,
    set: &UncertaintySet,
    controls: &[ControlPath],
    grid: &TimeGrid,
    n: usize,
    seed: u64,
) -> Result<NormEstimate> {
    if p != 1 && p != 2 {
        return Err(Error::InvalidArgument(format!(
            "norm exponent must be 1 or 2, got {p}"
        )));
    }
    let mc = MonteCarlo::new(set, *grid, n, seed)?;
    let power = mc.upper(controls, |path| Ok(k.bind(path)?.sup_moment(set, p)))?;
    Ok(NormEstimate {
        p,
        norm: power.value.powf(1.0 / p as f64),
        power,
    })
}

/// `2(T+1)`.
pub fn continuity_constant(horizon: f64) -> f64 {
    2.0 * (horizon + 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuityCheck {
    /// `Ê[(∫∫ K dX)²]`.
    pub lhs: f64,
    pub lhs_std_error: f64,
    /// `Ê[∫ sup_v ∫ |K|² v(dz) du]`.
    pub norm_squared: f64,
    pub norm_std_error: f64,
    pub constant: f64,
    pub rhs: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Tests `Ê[(∫_0^T∫ K dX)²] ≤ C_T ‖K‖₂²` with `C_T = 2(T+1)` and tolerance
/// `3·sqrt(se_lhs² + (C_T se_norm)²)`.
pub fn continuity_bound_check(
    k: &SimpleIntegrand,
    set: &UncertaintySet,
    controls: &[ControlPath],
    grid: &TimeGrid,
    n: usize,
    seed: u64,
) -> Result<ContinuityCheck> {
    let mc = MonteCarlo::new(set, *grid, n, seed)?;
    let (s, t) = (grid.t0(), grid.t_end());
    let lhs = mc.upper(controls, |path| {
        let i = ito_jump_integral(k, path, s, t)?;
        Ok(i * i)
    })?;
    let norm = mc.upper(controls, |path| Ok(k.bind(path)?.sup_moment(set, 2)))?;
    let constant = continuity_constant(t);
    let rhs = constant * norm.value;
    let tolerance = 3.0 * (lhs.std_error.powi(2) + (constant * norm.std_error).powi(2)).sqrt();
    Ok(ContinuityCheck {
        lhs: lhs.value,
        lhs_std_error: lhs.std_error,
        norm_squared: norm.value,
        norm_std_error: norm.std_error,
        constant,
        rhs,
        tolerance,
        pass: lhs.value <= rhs + tolerance,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsymmetryWitness {
    /// `Ê[I(K)]`.
    pub upper: f64,
    /// `Ê[-I(K)]`, i.e. minus the lower expectation.
    pub upper_of_negative: f64,
    pub std_error: f64,
    /// `upper + upper_of_negative > 6·std_error`.
    pub asymmetric: bool,
}

/// Compares `Ê[I]` with `-Ê[-I]` for `I = ∫_0^T∫ K dX`.
pub fn asymmetry_witness(
    k: &SimpleIntegrand,
    set: &UncertaintySet,
    controls: &[ControlPath],
    grid: &TimeGrid,
    n: usize,
    seed: u64,
) -> Result<AsymmetryWitness> {
    let mc = MonteCarlo::new(set, *grid, n, seed)?;
    let (s, t) = (grid.t0(), grid.t_end());
    let up = mc.upper(controls, |p| ito_jump_integral(k, p, s, t))?;
    let down = mc.upper(controls, |p| Ok(-ito_jump_integral(k, p, s, t)?))?;
    let std_error = (up.std_error.powi(2) + down.std_error.powi(2)).sqrt();
    let gap = up.value + down.value;
    Ok(AsymmetryWitness {
        upper: up.value,
        upper_of_negative: down.value,
        std_error,
        asymmetric: gap > 6.0 * std_error,
    })
}

/// Shape of the values of an elementary process.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueShape {
    Scalar,
    /// `R^d`.
    Vector,
    /// Symmetric `d x d`, row-major.
    Matrix,
}

impl ValueShape {
    fn len(self, d: usize) -> usize {
        match self {
            Self::Scalar => 1,
            Self::Vector => d,
            Self::Matrix => d * d,
        }
    }
}

/// `η_t = Σ_k ξ_k 1_{[t_k, t_{k+1})}(t)` with `ξ_k` observed by `t_k`;
/// each component of `ξ_k` is a cylinder functional.
#[derive(Debug, Clone)]
pub struct ElementaryProcess {
    dim: usize,
    shape: ValueShape,
    partition: Vec<f64>,
    coefficients: Vec<Vec<CylinderFunctional>>,
}

impl ElementaryProcess {
    pub fn new(
        dim: usize,
        shape: ValueShape,
        partition: Vec<f64>,
        coefficients: Vec<Vec<CylinderFunctional>>,
    ) -> Result<Self> {
        if partition.len() < 2 || partition.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "partition must be increasing with 2+ points".into(),
            ));
        }
        let width = shape.len(dim);
        if coefficients.len() != partition.len() - 1
            || coefficients.iter().any(|c| c.len() != width)
        {
            return Err(Error::InvalidArgument(format!(
                "need {} coefficients of width {width}",
                partition.len() - 1
            )));
        }
        for (k, row) in coefficients.iter().enumerate() {
            for f in row {
                if f.arity() > 0 && f.times()[f.arity() - 1] > partition[k] + 1e-12 {
                    return Err(Error::InvalidArgument(format!(
                        "coefficient on interval {k} looks past {}",
                        partition[k]
                    )));
                }
            }
        }
        Ok(Self {
            dim,
            shape,
            partition,
            coefficients,
        })
    }

    /// Deterministic constant value on `[t0, t1)`.
    pub fn constant(
        dim: usize,
        shape: ValueShape,
        t0: f64,
        t1: f64,
        value: &[f64],
    ) -> Result<Self> {
        let row = value
            .iter()
            .map(|&c| CylinderFunctional::constant(c))
            .collect();
        Self::new(dim, shape, vec![t0, t1], vec![row])
    }

    /// The zero process of the given shape.
    pub fn zero(dim: usize, shape: ValueShape, t0: f64, t1: f64) -> Result<Self> {
        Self::constant(dim, shape, t0, t1, &vec![0.0; shape.len(dim)])
    }

    pub fn shape(&self) -> ValueShape {
        self.shape
    }

    pub fn width(&self) -> usize {
        self.shape.len(self.dim)
    }

    fn bind(&self, path: &ScenarioPath) -> Result<Vec<Vec<f64>>> {
        self.coefficients
            .iter()
            .map(|row| row.iter().map(|f| f.eval_path(path)).collect())
            .collect()
    }

    fn interval(&self, t: f64) -> Option<usize> {
        let p = &self.partition;
        if t < p[0] - 1e-12 || t >= p[p.len() - 1] - 1e-12 {
            return None;
        }
        Some((p.partition_point(|&s| s <= t + 1e-12)).max(1) - 1)
    }

    /// Left-point values on every step of the path grid (zero outside the partition).
    pub fn left_values(&self, path: &ScenarioPath) -> Result<Vec<Vec<f64>>> {
        if path.dim() != self.dim {
            return Err(Error::InvalidArgument(
                "process and path dimensions differ".into(),
            ));
        }
        let coeff = self.bind(path)?;
        let grid = path.grid();
        Ok((0..grid.steps())
            .map(|k| match self.interval(grid.time(k)) {
                Some(i) => coeff[i].clone(),
                None => vec![0.0; self.width()],
            })
            .collect())
    }
}

fn require_shape(p: &ElementaryProcess, shape: ValueShape) -> Result<()> {
    if p.shape != shape {
        return Err(Error::InvalidArgument(format!(
            "expected a {shape:?} process, got {:?}",
            p.shape
        )));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `Σ_k Z_{t_k} · (B_{t_{k+1}} - B_{t_k})` over the continuous part.
pub fn db_integral(z: &ElementaryProcess, path: &ScenarioPath) -> Result<f64> {
    require_shape(z, ValueShape::Vector)?;
    let vals = z.left_values(path)?;
    Ok(vals
        .iter()
        .enumerate()
        .map(|(k, v)| dot(v, &path.continuous_increment(k)))
        .sum())
}

/// `Σ_k η_{t_k} Δt`.
pub fn ds_integral(eta: &ElementaryProcess, path: &ScenarioPath) -> Result<f64> {
    require_shape(eta, ValueShape::Scalar)?;
    let dt = path.grid().dt();
    Ok(eta.left_values(path)?.iter().map(|v| v[0] * dt).sum())
}

/// `Σ_k η_{t_k} : Δ<B>_k`.
pub fn qv_integral(eta: &ElementaryProcess, path: &ScenarioPath) -> Result<f64> {
    require_shape(eta, ValueShape::Matrix)?;
    let vals = eta.left_values(path)?;
    Ok(vals
        .iter()
        .enumerate()
        .map(|(k, v)| dot(v, &path.qv_increment(k)))
        .sum())
}

/// `Y_t = Y_0 + ∫α ds + ∫β : d<B> + ∫Z dB + ∫∫K X(ds,dz)` in `R^m`, with
/// one entry per component in each list.
#[derive(Debug, Clone)]
pub struct ItoLevyComponents {
    pub y0: Vec<f64>,
    pub alpha: Vec<ElementaryProcess>,
    pub beta: Vec<ElementaryProcess>,
    pub z: Vec<ElementaryProcess>,
    pub k: Vec<SimpleIntegrand>,
}

impl ItoLevyComponents {
    pub fn dim(&self) -> usize {
        self.y0.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.dim();
        if m == 0
            || self.alpha.len() != m
            || self.beta.len() != m
            || self.z.len() != m
            || self.k.len() != m
        {
            return Err(Error::InvalidArgument(format!(
                "components need {m} entries of each kind"
            )));
        }
        for i in 0..m {
            require_shape(&self.alpha[i], ValueShape::Scalar)?;
            require_shape(&self.beta[i], ValueShape::Matrix)?;
            require_shape(&self.z[i], ValueShape::Vector)?;
        }
        Ok(())
    }
}

/// Twice continuously differentiable `f: R^m -> R`.
pub trait C2Function: Sync {
    fn value(&self, y: &[f64]) -> f64;
    fn gradient(&self, y: &[f64]) -> Vec<f64>;
    /// Row-major `m x m`.
    fn hessian(&self, y: &[f64]) -> Vec<f64>;
}

/// `f(y) = |y|²`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SquaredNorm;

impl C2Function for SquaredNorm {
    fn value(&self, y: &[f64]) -> f64 {
        dot(y, y)
    }

    fn gradient(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| 2.0 * v).collect()
    }

    fn hessian(&self, y: &[f64]) -> Vec<f64> {
        let m = y.len();
        (0..m * m)
            .map(|i| if i / m == i % m { 2.0 } else { 0.0 })
            .collect()
    }
}

/// `f(y) = a · y + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub a: Vec<f64>,
    pub b: f64,
}

impl C2Function for Affine {
    fn value(&self, y: &[f64]) -> f64 {
        dot(&self.a, y) + self.b
    }

    fn gradient(&self, _y: &[f64]) -> Vec<f64> {
        self.a.clone()
    }

    fn hessian(&self, y: &[f64]) -> Vec<f64> {
        vec![0.0; y.len() * y.len()]
    }
}

/// `f(y) = Σ sin(y_i)`, bounded with bounded derivatives.
#[derive(Debug, Clone, Copy, Default)]
pub struct SineSum;

impl C2Function for SineSum {
    fn value(&self, y: &[f64]) -> f64 {
        y.iter().map(|v| v.sin()).sum()
    }

    fn gradient(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| v.cos()).collect()
    }

    fn hessian(&self, y: &[f64]) -> Vec<f64> {
        let m = y.len();
        (0..m * m)
            .map(|i| if i / m == i % m { -y[i / m].sin() } else { 0.0 })
            .collect()
    }
}

/// Outcome of one Itô formula evaluation along a path.
#[derive(Debug, Clone, PartialEq)]
pub struct ItoFormulaOutcome {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    /// `Y` at every grid node.
    pub y: Vec<Vec<f64>>,
}

/// Builds `Y` along `path` and compares `f(Y_T) - f(Y_0)` with the sum of the
/// Itô formula terms.
///
/// On each step the continuous increment is applied first, with its
/// first- and second-order terms evaluated at the left point; the step's
/// jumps then follow one by one, each contributing `f(Y_- + K) - f(Y_-)`.
pub fn ito_formula(
    f: &dyn C2Function,
    comps: &ItoLevyComponents,
    path: &ScenarioPath,
) -> Result<ItoFormulaOutcome> {
    comps.validate()?;
    let m = comps.dim();
    let d = path.dim();
    let alpha = comps
        .alpha
        .iter()
        .map(|p| p.left_values(path))
        .collect::<Result<Vec<_>>>()?;
    let beta = comps
        .beta
        .iter()
        .map(|p| p.left_values(path))
        .collect::<Result<Vec<_>>>()?;
    let z = comps
        .z
        .iter()
        .map(|p| p.left_values(path))
        .collect::<Result<Vec<_>>>()?;
    let k = comps
        .k
        .iter()
        .map(|p| p.bind(path))
        .collect::<Result<Vec<_>>>()?;
    let grid = path.grid();
    let dt = grid.dt();

    let mut y = comps.y0.clone();
    let mut ys = Vec::with_capacity(grid.nodes());
    ys.push(y.clone());
    let mut rhs = 0.0;
    let mut cont = vec![0.0; m];
    for step in 0..grid.steps() {
        let db = path.continuous_increment(step);
        let dqv = path.qv_increment(step);
        for i in 0..m {
            cont[i] = alpha[i][step][0] * dt + dot(&beta[i][step], &dqv) + dot(&z[i][step], &db);
        }
        let grad = f.gradient(&y);
        let hess = f.hessian(&y);
        rhs += dot(&grad, &cont);
        let mut second = 0.0;
        for i in 0..m {
            for j in 0..m {
                let (zi, zj) = (&z[i][step], &z[j][step]);
                let mut quad = 0.0;
                for a in 0..d {
                    for b in 0..d {
                        quad += zi[a] * dqv[a * d + b] * zj[b];
                    }
                }
                second += hess[i * m + j] * quad;
            }
        }
        rhs += 0.5 * second;
        y.iter_mut().zip(&cont).for_each(|(v, c)| *v += c);
        for jump in path.jumps_in_step(step) {
            let before = f.value(&y);
            for i in 0..m {
                y[i] += k[i].eval(jump.time, &jump.size);
            }
            rhs += f.value(&y) - before;
        }
        ys.push(y.clone());
    }
    let lhs = f.value(&y) - f.value(&comps.y0);
    Ok(ItoFormulaOutcome {
        lhs,
        rhs,
        residual: (lhs - rhs).abs(),
        y: ys,
    })
}

/// `|f(Y_T) - f(Y_0) - (Itô formula terms)|` along `path`.
pub fn ito_formula_residual(
    f: &dyn C2Function,
    comps: &ItoLevyComponents,
    path: &ScenarioPath,
) -> Result<f64> {
    Ok(ito_formula(f, comps, path)?.residual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::Simulator;
    use crate::uncertainty::{JumpMeasure, LevyTriple};

    fn two_jumps() -> ScenarioPath {
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        ScenarioPath::from_jumps(grid, 1, &[(0.3, vec![1.0]), (0.7, vec![1.0])]).unwrap()
    }

    fn intensity_family() -> UncertaintySet {
        UncertaintySet::new(vec![
            LevyTriple::scalar(JumpMeasure::scalar(&[(1.0, 0.5)]), 0.0, 0.0),
            LevyTriple::scalar(JumpMeasure::scalar(&[(1.0, 1.0)]), 0.0, 0.0),
        ])
    }

    #[test]
    fn counts_jumps() {
        let p = two_jumps();
        assert_eq!(
            jump_measure_count(&p, 0.0, 1.0, &SizeSet::Point(vec![1.0])),
            2
        );
        assert_eq!(
            jump_measure_count(&p, 0.0, 1.0, &SizeSet::Point(vec![2.0])),
            0
        );
        let parts: usize = [(0.0, 0.3), (0.3, 0.5), (0.5, 1.0)]
            .iter()
            .map(|&(s, t)| jump_measure_count(&p, s, t, &SizeSet::All))
            .sum();
        assert_eq!(parts, 2);
    }

    #[test]
    fn identity_integrand_sums_sizes() {
        let p = two_jumps();
        let k = SimpleIntegrand::deterministic(0.0, 1.0, Kernel::linear(1.0)).unwrap();
        assert_eq!(ito_jump_integral(&k, &p, 0.0, 1.0).unwrap(), 2.0);
        let away = SimpleIntegrand::deterministic(0.0, 1.0, Kernel::tent(3.0, 0.5, 1.0)).unwrap();
        assert_eq!(ito_jump_integral(&away, &p, 0.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn kernels_must_vanish_at_origin() {
        let bad = Kernel::custom("one", None, |_| 1.0);
        assert!(SimpleIntegrand::deterministic(0.0, 1.0, bad).is_err());
    }

    #[test]
    fn coefficients_must_be_adapted() {
        let f = CylinderFunctional::terminal(0.8, |x| x, 10.0, 1.0).unwrap();
        let r = SimpleIntegrand::new(
            1,
            vec![0.0, 0.5, 1.0],
            vec![Kernel::linear(1.0)],
            vec![vec![CylinderFunctional::constant(1.0)], vec![f]],
        );
        assert!(r.is_err());
    }

    #[test]
    fn overlapping_supports_are_found() {
        let k = SimpleIntegrand::new(
            1,
            vec![0.0, 1.0],
            vec![
                Kernel::tent(1.0, 0.5, 1.0),
                Kernel::tent(1.2, 0.5, 1.0),
                Kernel::tent(-1.0, 0.5, 1.0),
            ],
            vec![vec![CylinderFunctional::constant(1.0); 3]],
        )
        .unwrap();
        assert_eq!(k.support_overlaps(3.0), vec![(0, 1)]);
    }

    #[test]
    fn deterministic_norm_is_exact() {
        let set = intensity_family();
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let c = ControlPath::all_constants(&set);
        let k = SimpleIntegrand::deterministic(0.0, 1.0, Kernel::linear(1.0)).unwrap();
        let n = integrand_norm(&k, 2, &set, &c, &grid, 100, 1).unwrap();
        assert_eq!(n.norm, 1.0);
        let z = SimpleIntegrand::zero(0.0, 1.0).unwrap();
        assert_eq!(
            integrand_norm(&z, 1, &set, &c, &grid, 100, 1).unwrap().norm,
            0.0
        );
        assert!(integrand_norm(&k, 3, &set, &c, &grid, 100, 1).is_err());
        assert_eq!(continuity_constant(1.0), 4.0);
    }

    #[test]
    fn elementary_integrals() {
        let set = UncertaintySet::singleton(LevyTriple::scalar(JumpMeasure::zero(1), 0.0, 0.5));
        let grid = TimeGrid::new(0.0, 2.0, 40).unwrap();
        let sim = Simulator::new(&set, grid).unwrap();
        let p = sim.path(&ControlPath::constant(0), 5, 0).unwrap();
        let one = ElementaryProcess::constant(1, ValueShape::Vector, 0.0, 2.0, &[1.0]).unwrap();
        assert!((db_integral(&one, &p).unwrap() - p.terminal()[0]).abs() < 1e-12);
        let s = ElementaryProcess::constant(1, ValueShape::Scalar, 0.0, 2.0, &[1.0]).unwrap();
        assert!((ds_integral(&s, &p).unwrap() - 2.0).abs() < 1e-12);
        let m = ElementaryProcess::constant(1, ValueShape::Matrix, 0.0, 2.0, &[1.0]).unwrap();
        assert!((qv_integral(&m, &p).unwrap() - 0.5).abs() < 1e-12);
        assert!(db_integral(&s, &p).is_err());
    }

    fn jump_only(k: SimpleIntegrand) -> ItoLevyComponents {
        ItoLevyComponents {
            y0: vec![0.5],
            alpha: vec![ElementaryProcess::zero(1, ValueShape::Scalar, 0.0, 1.0).unwrap()],
            beta: vec![ElementaryProcess::zero(1, ValueShape::Matrix, 0.0, 1.0).unwrap()],
            z: vec![ElementaryProcess::zero(1, ValueShape::Vector, 0.0, 1.0).unwrap()],
            k: vec![k],
        }
    }

    #[test]
    fn pure_jump_formula_telescopes() {
        let set = intensity_family();
        let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let sim = Simulator::new(&set, grid).unwrap();
        let comps =
            jump_only(SimpleIntegrand::deterministic(0.0, 1.0, Kernel::linear(0.7)).unwrap());
        for r in 0..20 {
            let p = sim.path(&ControlPath::constant(1), 9, r).unwrap();
            let out = ito_formula(&SquaredNorm, &comps, &p).unwrap();
            assert!(out.residual < 1e-12);
            let jumps = p.jumps().len() as f64;
            assert!((out.y.last().unwrap()[0] - (0.5 + 0.7 * jumps)).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_formula_is_exact() {
        let set = UncertaintySet::singleton(LevyTriple::scalar(
            JumpMeasure::scalar(&[(1.0, 1.0)]),
            0.0,
            0.8,
        ));
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let p = Simulator::new(&set, grid)
            .unwrap()
            .path(&ControlPath::constant(0), 2, 3)
            .unwrap();
        let mut comps =
            jump_only(SimpleIntegrand::deterministic(0.0, 1.0, Kernel::linear(1.0)).unwrap());
        comps.z[0] = ElementaryProcess::constant(1, ValueShape::Vector, 0.0, 1.0, &[1.3]).unwrap();
        comps.alpha[0] =
            ElementaryProcess::constant(1, ValueShape::Scalar, 0.0, 1.0, &[0.2]).unwrap();
        let f = Affine {
            a: vec![2.0],
            b: 1.0,
        };
        assert!(ito_formula_residual(&f, &comps, &p).unwrap() < 1e-12);
    }
}
