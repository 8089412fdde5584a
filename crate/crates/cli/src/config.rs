//! Experiment configuration: TOML grammar, built-in payoffs and coefficient
//! families, and validation into ready-to-run objects.
//!
//! Unknown keys are rejected everywhere. Named blocks (`sets`, `grids`,
//! `spaces`, `controls`) are referenced from experiments by name; experiment
//! references (`reference = { experiment = ".." }`, `pide-feedback` controls)
//! must point at an earlier experiment of the right kind.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use glevy_core::uncertainty::{expand_family, Atom, FamilyDescriptor, FamilyParam, ParamRange};
use glevy_core::{JumpMeasure, LevyTriple, SpatialGrid, TimeGrid, UncertaintySet};
use serde::Deserialize;

use crate::error::CliError;
use crate::oracles::OracleSpec;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    output: Option<PathBuf>,
    #[serde(default)]
    sets: BTreeMap<String, SetSpec>,
    #[serde(default)]
    grids: BTreeMap<String, GridSpec>,
    #[serde(default)]
    spaces: BTreeMap<String, SpaceSpec>,
    #[serde(default)]
    controls: BTreeMap<String, ControlSpec>,
    #[serde(default, rename = "experiment")]
    experiments: Vec<Experiment>,
}

/// Validated configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    /// Output directory (relative paths resolve against the config file).
    pub output: PathBuf,
    pub sets: BTreeMap<String, UncertaintySet>,
    pub grids: BTreeMap<String, TimeGrid>,
    pub spaces: BTreeMap<String, SpatialGrid>,
    pub controls: BTreeMap<String, ControlSpec>,
    pub experiments: Vec<Experiment>,
}

/// Name of the implicit control family made of every constant triple.
pub const CONSTANTS: &str = "constants";

// ---------------------------------------------------------------- blocks

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetSpec {
    #[serde(default)]
    pub triples: Vec<TripleSpec>,
    pub family: Option<FamilySpec>,
    #[serde(default)]
    pub drift_free: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripleSpec {
    pub dim: Option<usize>,
    #[serde(default)]
    pub atoms: Vec<AtomSpec>,
    #[serde(default)]
    pub drift: Numbers,
    /// Scalar `σ` (meaning `σ·I`) or a row-major `d x d` matrix.
    #[serde(default)]
    pub vol: Numbers,
}

/// `[size, weight]` for scalar sizes, `{ at = [..], weight = w }` otherwise.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum AtomSpec {
    Scalar([f64; 2]),
    Vector { at: Vec<f64>, weight: f64 },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Numbers {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl Default for Numbers {
    fn default() -> Self {
        Numbers::Scalar(0.0)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub base: TripleSpec,
    pub ranges: Vec<RangeSpec>,
    pub resolution: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "param", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RangeSpec {
    Intensity {
        lo: f64,
        hi: f64,
    },
    Volatility {
        #[serde(default)]
        row: usize,
        #[serde(default)]
        col: usize,
        lo: f64,
        hi: f64,
    },
    Drift {
        #[serde(default)]
        component: usize,
        lo: f64,
        hi: f64,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub t0: f64,
    pub t_end: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub nodes: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ControlSpec {
    /// One constant control per triple.
    Constants,
    /// Constant controls for the listed triples.
    Indices { indices: Vec<usize> },
    /// Argmax feedback of an earlier terminal-convention `pide` experiment,
    /// started at `x0`, optionally with the constant controls.
    PideFeedback {
        experiment: String,
        #[serde(default)]
        x0: f64,
        #[serde(default = "yes")]
        with_constants: bool,
    },
}

fn yes() -> bool {
    true
}

// ------------------------------------------------------- shared pieces

/// Built-in scalar payoffs.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(tag = "fn", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Payoff {
    Identity,
    Square,
    Abs,
    Min { cap: f64 },
    Max { floor: f64 },
    Clip { lo: f64, hi: f64 },
    Constant { value: f64 },
    Call { strike: f64 },
    Put { strike: f64 },
    Sin,
    Cos,
    Tanh,
}

impl Payoff {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Payoff::Identity => x,
            Payoff::Square => x * x,
            Payoff::Abs => x.abs(),
            Payoff::Min { cap } => x.min(cap),
            Payoff::Max { floor } => x.max(floor),
            Payoff::Clip { lo, hi } => x.clamp(lo, hi),
            Payoff::Constant { value } => value,
            Payoff::Call { strike } => (x - strike).max(0.0),
            Payoff::Put { strike } => (strike - x).max(0.0),
            Payoff::Sin => x.sin(),
            Payoff::Cos => x.cos(),
            Payoff::Tanh => x.tanh(),
        }
    }

    /// `(sup |φ|, Lipschitz constant)` on the whole line; infinite when
    /// unbounded.
    pub fn constants(&self) -> (f64, f64) {
        let inf = f64::INFINITY;
        match *self {
            Payoff::Identity | Payoff::Abs => (inf, 1.0),
            Payoff::Square => (inf, inf),
            Payoff::Min { .. } | Payoff::Max { .. } | Payoff::Call { .. } | Payoff::Put { .. } => {
                (inf, 1.0)
            }
            Payoff::Clip { lo, hi } => (lo.abs().max(hi.abs()), 1.0),
            Payoff::Constant { value } => (value.abs(), 0.0),
            Payoff::Sin | Payoff::Cos | Payoff::Tanh => (1.0, 1.0),
        }
    }
}

/// How a functional reads the path at its observation times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Observe {
    /// `φ(X_{t_n})`.
    #[default]
    Level,
    /// `Σ_i φ(X_{t_i} - X_{t_{i-1}})`.
    Increments,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionalSpec {
    pub payoff: Payoff,
    /// Observation times; default: the end of the experiment's grid.
    pub times: Option<Vec<f64>>,
    #[serde(default)]
    pub observe: Observe,
    #[serde(default = "one")]
    pub scale: f64,
    pub bound: Option<f64>,
    pub lipschitz: Option<f64>,
}

fn one() -> f64 {
    1.0
}

/// What a computed value is compared with.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Reference {
    Value(f64),
    Oracle(OracleSpec),
    Experiment { experiment: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    /// `|value - reference| <= tolerance`.
    #[default]
    TwoSided,
    /// `value <= reference + tolerance`.
    Upper,
}

/// `tolerance = max(se·std_error, rel·|reference|, abs, dt·Δt)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToleranceSpec {
    #[serde(default)]
    pub se: f64,
    #[serde(default)]
    pub rel: f64,
    #[serde(default)]
    pub abs: f64,
    #[serde(default)]
    pub dt: f64,
    #[serde(default)]
    pub side: Side,
}

impl ToleranceSpec {
    pub fn tolerance(&self, reference: f64, std_error: f64, dt: f64) -> f64 {
        (self.se * std_error)
            .max(self.rel * reference.abs())
            .max(self.abs)
            .max(self.dt * dt)
    }

    pub fn passes(&self, value: f64, reference: f64, tolerance: f64) -> bool {
        match self.side {
            Side::TwoSided => (value - reference).abs() <= tolerance,
            Side::Upper => value <= reference + tolerance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConventionSpec {
    Initial,
    #[default]
    Terminal,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EventSpec {
    NoJumpUntil { t: f64 },
    JumpsWithin { gap: f64 },
    AtLeastJumps { count: usize },
}

/// Jump kernels `ψ(z)` of the first size coordinate, with `ψ(0) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(tag = "psi", rename_all = "kebab-case", deny_unknown_fields)]
pub enum KernelSpec {
    Linear {
        slope: f64,
    },
    Tent {
        center: f64,
        half_width: f64,
        height: f64,
    },
    /// `height` on `[lo, hi]` away from the origin.
    Indicator {
        lo: f64,
        hi: f64,
        height: f64,
    },
}

/// Scalar SDE coefficient families.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "sde", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SdeSpecConfig {
    /// `dY = a Y ds`.
    Linear { a: f64 },
    /// `K(y, z) = y`.
    Doubling,
    /// `dY = dB + z L(dz, ds)`.
    Identity,
    /// Piecewise-linear `b`, `h`, `σ`, `k` tabulated at increasing `x`;
    /// jumps are `K(y, z) = k(y)·z`.
    Tabulated {
        x: Vec<f64>,
        b: Vec<f64>,
        #[serde(default)]
        h: Vec<f64>,
        #[serde(default)]
        sigma: Vec<f64>,
        #[serde(default)]
        k: Vec<f64>,
    },
}

/// Scalar generators `g(y)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Deserialize)]
#[serde(tag = "gen", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GeneratorSpec {
    #[default]
    Zero,
    Constant {
        c: f64,
    },
    /// `a·y + c`.
    Affine {
        a: f64,
        #[serde(default)]
        c: f64,
    },
}

impl GeneratorSpec {
    pub fn eval(&self, y: f64) -> f64 {
        match *self {
            GeneratorSpec::Zero => 0.0,
            GeneratorSpec::Constant { c } => c,
            GeneratorSpec::Affine { a, c } => a * y + c,
        }
    }
}

/// Scalar forward dynamics for FBSDEs.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(tag = "forward", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ForwardSpecConfig {
    /// `X = x0 + B`.
    Identity,
    /// `dX = a X ds + σ dB + κ z L(dz, ds)`.
    Affine { a: f64, sigma: f64, kappa: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(tag = "f", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TestFunction {
    Square,
    Sine,
    Affine { a: f64, b: f64 },
}

// ---------------------------------------------------------- experiments

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Mc,
    Cylinder,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectationParams {
    pub id: String,
    pub set: String,
    pub grid: String,
    #[serde(default = "constants")]
    pub controls: String,
    pub functional: FunctionalSpec,
    #[serde(default)]
    pub method: Method,
    /// Cylinder method only.
    pub space: Option<String>,
    pub max_dt: Option<f64>,
    #[serde(default)]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    pub reference: Option<Reference>,
    #[serde(default)]
    pub tolerance: ToleranceSpec,
}

fn constants() -> String {
    CONSTANTS.into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViscositySpec {
    pub constant: f64,
    pub panel: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PideParams {
    pub id: String,
    pub set: String,
    pub space: String,
    pub horizon: f64,
    pub steps: usize,
    pub payoff: Payoff,
    #[serde(default)]
    pub convention: ConventionSpec,
    #[serde(default)]
    pub x0: f64,
    pub reference: Option<Reference>,
    #[serde(default)]
    pub tolerance: ToleranceSpec,
    /// Write every n-th time level to the detail CSV.
    #[serde(default = "one_usize")]
    pub detail_every: usize,
    pub viscosity: Option<ViscositySpec>,
}

fn one_usize() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineSpec {
    pub space: String,
    pub steps: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DppParams {
    pub id: String,
    pub set: String,
    pub space: String,
    pub horizon: f64,
    pub steps: usize,
    pub payoff: Payoff,
    #[serde(default = "constants")]
    pub controls: String,
    pub panel: Vec<[f64; 2]>,
    pub h: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
    pub constant: f64,
    /// Finer solve on which the panel residual must not grow.
    pub refine: Option<RefineSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacityParams {
    pub id: String,
    pub set: String,
    pub grid: String,
    #[serde(default = "constants")]
    pub controls: String,
    pub event: EventSpec,
    pub samples: usize,
    pub seed: u64,
    pub reference: Option<Reference>,
    #[serde(default)]
    pub tolerance: ToleranceSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxiomsParams {
    pub id: String,
    pub set: String,
    pub grid: String,
    #[serde(default = "constants")]
    pub controls: String,
    /// Checked on the pairs `(ξ_i, ξ_{i+1})`, cyclically.
    pub functionals: Vec<FunctionalSpec>,
    pub lambda: f64,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntegralCheck {
    /// `Ê[I^power]` against a reference.
    #[default]
    Expectation,
    /// `Ê[I] + Ê[-I] > 6·se`.
    Asymmetry,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItoIntegralParams {
    pub id: String,
    pub set: String,
    pub grid: String,
    #[serde(default = "constants")]
    pub controls: String,
    pub kernel: KernelSpec,
    #[serde(default = "one_u32")]
    pub power: u32,
    #[serde(default)]
    pub check: IntegralCheck,
    pub samples: usize,
    pub seed: u64,
    pub reference: Option<Reference>,
    #[serde(default)]
    pub tolerance: ToleranceSpec,
}

fn one_u32() -> u32 {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuityParams {
    pub id: String,
    pub sets: Vec<String>,
    pub grid: String,
    /// Number of random simple integrands per set.
    pub corpus: usize,
    pub corpus_seed: u64,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ItoCheck {
    /// Largest residual over the paths must not exceed `tolerance`.
    Exact { tolerance: f64 },
    /// RMS residual ratio between the grid and its halving must lie in
    /// `target ± band·target`.
    Halving { target: f64, band: f64 },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItoFormulaParams {
    pub id: String,
    pub set: String,
    pub grid: String,
    pub f: TestFunction,
    pub y0: f64,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default)]
    pub z: f64,
    pub kernel: Option<KernelSpec>,
    /// Number of simulated paths.
    pub paths: usize,
    pub seed: u64,
    pub check: ItoCheck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SdeCheck {
    /// `max_θ E[φ(Y_T)]` against a reference.
    #[default]
    Expectation,
    /// Observed order of the mean strong error against the reference when
    /// the grid is halved.
    EulerOrder,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeParams {
    pub id: String,
    pub set: String,
    pub grid: String,
    #[serde(default = "constants")]
    pub controls: String,
    pub sde: SdeSpecConfig,
    pub y0: f64,
    #[serde(default = "identity_payoff")]
    pub payoff: Payoff,
    #[serde(default)]
    pub check: SdeCheck,
    /// Euler-order check only.
    #[serde(default)]
    pub min_order: f64,
    pub samples: usize,
    pub seed: u64,
    pub reference: Option<Reference>,
    #[serde(default)]
    pub tolerance: ToleranceSpec,
}

fn identity_payoff() -> Payoff {
    Payoff::Identity
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PicardParams {
    pub id: String,
    pub set: String,
    pub grid: String,
    #[serde(default = "constants")]
    pub controls: String,
    pub sde: SdeSpecConfig,
    pub y0: f64,
    pub samples: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Ratio bound (one half in the contraction argument).
    #[serde(default = "half")]
    pub bound: f64,
    /// Multiplier of the ratio standard error.
    #[serde(default = "three")]
    pub se: f64,
}

fn half() -> f64 {
    0.5
}

fn three() -> f64 {
    3.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BsdeCheck {
    /// Value at the origin against a reference.
    #[default]
    Reference,
    /// Every node against `solve_pide` (zero generators).
    PideIdentity,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BsdeParams {
    pub id: String,
    pub set: String,
    pub space: String,
    pub max_dt: f64,
    pub horizon: f64,
    pub terminal: Payoff,
    #[serde(default)]
    pub b: GeneratorSpec,
    #[serde(default)]
    pub h: GeneratorSpec,
    #[serde(default)]
    pub check: BsdeCheck,
    pub reference: Option<Reference>,
    #[serde(default)]
    pub tolerance: ToleranceSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FbsdeParams {
    pub id: String,
    pub set: String,
    pub space: String,
    pub max_dt: f64,
    pub horizon: f64,
    pub forward: ForwardSpecConfig,
    #[serde(default)]
    pub x0: f64,
    pub terminal: Payoff,
    #[serde(default)]
    pub f: GeneratorSpec,
    #[serde(default)]
    pub g: GeneratorSpec,
    pub points: usize,
    pub lookahead: usize,
    pub samples: usize,
    pub seed: u64,
    pub grid_constant: f64,
    /// Optional check of `y(0, x0)`.
    pub reference: Option<Reference>,
    #[serde(default)]
    pub tolerance: ToleranceSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Experiment {
    Expectation(ExpectationParams),
    Pide(PideParams),
    Dpp(DppParams),
    Capacity(CapacityParams),
    Axioms(AxiomsParams),
    ItoIntegral(ItoIntegralParams),
    ItoFormula(ItoFormulaParams),
    ContinuityBound(ContinuityParams),
    Sde(SdeParams),
    Picard(PicardParams),
    Bsde(BsdeParams),
    Fbsde(FbsdeParams),
}

impl Experiment {
    pub fn id(&self) -> &str {
        match self {
            Experiment::Expectation(p) => &p.id,
            Experiment::Pide(p) => &p.id,
            Experiment::Dpp(p) => &p.id,
            Experiment::Capacity(p) => &p.id,
            Experiment::Axioms(p) => &p.id,
            Experiment::ItoIntegral(p) => &p.id,
            Experiment::ItoFormula(p) => &p.id,
            Experiment::ContinuityBound(p) => &p.id,
            Experiment::Sde(p) => &p.id,
            Experiment::Picard(p) => &p.id,
            Experiment::Bsde(p) => &p.id,
            Experiment::Fbsde(p) => &p.id,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::Expectation(_) => "expectation",
            Experiment::Pide(_) => "pide",
            Experiment::Dpp(_) => "dpp",
            Experiment::Capacity(_) => "capacity",
            Experiment::Axioms(_) => "axioms",
            Experiment::ItoIntegral(_) => "ito-integral",
            Experiment::ItoFormula(_) => "ito-formula",
            Experiment::ContinuityBound(_) => "continuity-bound",
            Experiment::Sde(_) => "sde",
            Experiment::Picard(_) => "picard",
            Experiment::Bsde(_) => "bsde",
            Experiment::Fbsde(_) => "fbsde",
        }
    }

    /// Named blocks used by the experiment, as `(block, name)`.
    fn block_refs(&self) -> Vec<(&'static str, &str)> {
        let mut out = Vec::new();
        match self {
            Experiment::Expectation(p) => {
                out.extend([
                    ("sets", &*p.set),
                    ("grids", &p.grid),
                    ("controls", &p.controls),
                ]);
                if let Some(s) = &p.space {
                    out.push(("spaces", s));
                }
            }
            Experiment::Pide(p) => out.extend([("sets", &*p.set), ("spaces", &p.space)]),
            Experiment::Dpp(p) => {
                out.extend([
                    ("sets", &*p.set),
                    ("spaces", &p.space),
                    ("controls", &p.controls),
                ]);
                if let Some(r) = &p.refine {
                    out.push(("spaces", &r.space));
                }
            }
            Experiment::Capacity(p) => out.extend([
                ("sets", &*p.set),
                ("grids", &p.grid),
                ("controls", &p.controls),
            ]),
            Experiment::Axioms(p) => out.extend([
                ("sets", &*p.set),
                ("grids", &p.grid),
                ("controls", &p.controls),
            ]),
            Experiment::ItoIntegral(p) => out.extend([
                ("sets", &*p.set),
                ("grids", &p.grid),
                ("controls", &p.controls),
            ]),
            Experiment::ItoFormula(p) => out.extend([("sets", &*p.set), ("grids", &p.grid)]),
            Experiment::ContinuityBound(p) => {
                out.extend(p.sets.iter().map(|s| ("sets", s.as_str())));
                out.push(("grids", &p.grid));
            }
            Experiment::Sde(p) => out.extend([
                ("sets", &*p.set),
                ("grids", &p.grid),
                ("controls", &p.controls),
            ]),
            Experiment::Picard(p) => out.extend([
                ("sets", &*p.set),
                ("grids", &p.grid),
                ("controls", &p.controls),
            ]),
            Experiment::Bsde(p) => out.extend([("sets", &*p.set), ("spaces", &p.space)]),
            Experiment::Fbsde(p) => out.extend([("sets", &*p.set), ("spaces", &p.space)]),
        }
        out
    }

    pub fn reference(&self) -> Option<&Reference> {
        match self {
            Experiment::Expectation(p) => p.reference.as_ref(),
            Experiment::Pide(p) => p.reference.as_ref(),
            Experiment::Capacity(p) => p.reference.as_ref(),
            Experiment::ItoIntegral(p) => p.reference.as_ref(),
            Experiment::Sde(p) => p.reference.as_ref(),
            Experiment::Bsde(p) => p.reference.as_ref(),
            Experiment::Fbsde(p) => p.reference.as_ref(),
            _ => None,
        }
    }

    pub fn controls(&self) -> Option<&str> {
        match self {
            Experiment::Expectation(p) => Some(&p.controls),
            Experiment::Dpp(p) => Some(&p.controls),
            Experiment::Capacity(p) => Some(&p.controls),
            Experiment::Axioms(p) => Some(&p.controls),
            Experiment::ItoIntegral(p) => Some(&p.controls),
            Experiment::Sde(p) => Some(&p.controls),
            Experiment::Picard(p) => Some(&p.controls),
            _ => None,
        }
    }
}

impl ExperimentConfig {
    /// Earlier experiments that `e` reads results from.
    pub fn dependencies(&self, e: &Experiment) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(Reference::Experiment { experiment }) = e.reference() {
            out.push(experiment.clone());
        }
        if let Some(c) = e.controls() {
            if let Some(ControlSpec::PideFeedback { experiment, .. }) = self.controls.get(c) {
                out.push(experiment.clone());
            }
        }
        out
    }
}

// ------------------------------------------------------------ building

fn numbers(n: &Numbers, len: usize, what: &str) -> std::result::Result<Vec<f64>, String> {
    match n {
        Numbers::Scalar(x) => Ok(vec![*x; len]),
        Numbers::Vector(v) if v.len() == len => Ok(v.clone()),
        Numbers::Vector(v) => Err(format!("{what} has {} entries, expected {len}", v.len())),
    }
}

fn build_triple(spec: &TripleSpec) -> std::result::Result<LevyTriple, String> {
    let inferred = spec
        .atoms
        .iter()
        .find_map(|a| match a {
            AtomSpec::Vector { at, .. } => Some(at.len()),
            AtomSpec::Scalar(_) => None,
        })
        .or(match &spec.drift {
            Numbers::Vector(v) => Some(v.len()),
            Numbers::Scalar(_) => None,
        });
    let d = spec.dim.or(inferred).unwrap_or(1);
    let atoms = spec
        .atoms
        .iter()
        .map(|a| match a {
            AtomSpec::Scalar([z, w]) => {
                if d == 1 {
                    Ok(Atom::new(vec![*z], *w))
                } else {
                    Err(format!(
                        "scalar atom [{z}, {w}] in a {d}-dimensional triple"
                    ))
                }
            }
            AtomSpec::Vector { at, weight } => Ok(Atom::new(at.clone(), *weight)),
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let drift = numbers(&spec.drift, d, "drift")?;
    let vol = match &spec.vol {
        Numbers::Scalar(s) => {
            let mut m = vec![0.0; d * d];
            (0..d).for_each(|i| m[i * d + i] = *s);
            m
        }
        v => numbers(v, d * d, "vol")?,
    };
    Ok(LevyTriple::new(JumpMeasure::new(d, atoms), drift, vol))
}

fn build_set(spec: &SetSpec) -> std::result::Result<UncertaintySet, String> {
    let mut triples = spec
        .triples
        .iter()
        .map(build_triple)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if let Some(f) = &spec.family {
        let base = build_triple(&f.base)?;
        let ranges = f
            .ranges
            .iter()
            .map(|r| match *r {
                RangeSpec::Intensity { lo, hi } => ParamRange::new(FamilyParam::Intensity, lo, hi),
                RangeSpec::Volatility { row, col, lo, hi } => {
                    ParamRange::new(FamilyParam::Volatility { row, col }, lo, hi)
                }
                RangeSpec::Drift { component, lo, hi } => {
                    ParamRange::new(FamilyParam::Drift { component }, lo, hi)
                }
            })
            .collect();
        let desc = FamilyDescriptor { base, ranges };
        let expanded = expand_family(&desc, f.resolution).map_err(|e| e.to_string())?;
        triples.extend(expanded.triples().iter().cloned());
    }
    UncertaintySet::new(triples)
        .with_drift_free(spec.drift_free)
        .validated()
        .map_err(|e| e.to_string())
}

/// Line and column of a byte offset.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

/// Parses and validates a configuration held in memory. `base` is the
/// directory relative output paths resolve against.
pub fn parse_config(text: &str, base: &Path) -> Result<ExperimentConfig, CliError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| {
        let msg = e.message().to_string();
        let msg = match e.span() {
            Some(span) => {
                let (line, col) = line_col(text, span.start);
                format!("line {line}, column {col}: {msg}")
            }
            None => msg,
        };
        CliError::Config(vec![msg])
    })?;

    let mut errors = Vec::new();
    let mut sets = BTreeMap::new();
    for (name, spec) in &raw.sets {
        match build_set(spec) {
            Ok(s) => {
                sets.insert(name.clone(), s);
            }
            Err(e) => errors.push(format!("set `{name}`: {e}")),
        }
    }
    let mut grids = BTreeMap::new();
    for (name, g) in &raw.grids {
        match TimeGrid::new(g.t0, g.t_end, g.steps) {
            Ok(t) => {
                grids.insert(name.clone(), t);
            }
            Err(e) => errors.push(format!("grid `{name}`: {e}")),
        }
    }
    let mut spaces = BTreeMap::new();
    for (name, s) in &raw.spaces {
        match SpatialGrid::new(s.x_min, s.x_max, s.nodes) {
            Ok(g) => {
                spaces.insert(name.clone(), g);
            }
            Err(e) => errors.push(format!("space `{name}`: {e}")),
        }
    }

    let mut controls = raw.controls.clone();
    if controls.contains_key(CONSTANTS) {
        errors.push(format!("control family name `{CONSTANTS}` is reserved"));
    }
    controls.insert(CONSTANTS.into(), ControlSpec::Constants);

    let mut seen: HashMap<&str, &'static str> = HashMap::new();
    for e in &raw.experiments {
        let id = e.id();
        if id.is_empty() || id.contains([',', '/', '\\', '"', '\n']) {
            errors.push(format!(
                "experiment id `{id}` must be non-empty without , / \\ or quotes"
            ));
        }
        for (block, name) in e.block_refs() {
            let known = match block {
                "sets" => raw.sets.contains_key(name),
                "grids" => raw.grids.contains_key(name),
                "spaces" => raw.spaces.contains_key(name),
                _ => controls.contains_key(name),
            };
            if !known {
                errors.push(format!("experiment `{id}`: unknown {block} entry `{name}`"));
            }
        }
        if let Some(Reference::Experiment { experiment }) = e.reference() {
            if !seen.contains_key(experiment.as_str()) {
                errors.push(format!(
                    "experiment `{id}`: reference `{experiment}` is not an earlier experiment"
                ));
            }
        }
        if let Some(c) = e.controls() {
            if let Some(ControlSpec::PideFeedback { experiment, .. }) = controls.get(c) {
                match seen.get(experiment.as_str()) {
                    Some(&"pide") => {}
                    Some(kind) => errors.push(format!(
                        "experiment `{id}`: control family `{c}` needs a pide experiment, `{experiment}` is {kind}"
                    )),
                    None => errors.push(format!(
                        "experiment `{id}`: control family `{c}` refers to `{experiment}`, which is not an earlier experiment"
                    )),
                }
            }
        }
        if seen.insert(id, e.kind()).is_some() {
            errors.push(format!("duplicate experiment id `{id}`"));
        }
    }

    if !errors.is_empty() {
        return Err(CliError::Config(errors));
    }
    let output = raw.output.unwrap_or_else(|| PathBuf::from("out"));
    let output = if output.is_relative() {
        base.join(output)
    } else {
        output
    };
    Ok(ExperimentConfig {
        output,
        sets,
        grids,
        spaces,
        controls,
        experiments: raw.experiments,
    })
}

/// Reads and validates a configuration file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_config(&text, base)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[sets.poisson]
triples = [{ atoms = [[1.0, 1.0]] }]

[grids.unit]
t_end = 1.0
steps = 10

[[experiment]]
id = "mean"
kind = "expectation"
set = "poisson"
grid = "unit"
functional = { payoff = { fn = "identity" } }
samples = 100
seed = 1
"#;

    fn errors(text: &str) -> Vec<String> {
        match parse_config(text, Path::new(".")) {
            Err(CliError::Config(e)) => e,
            other => panic!("expected config errors, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_loads() {
        let cfg = parse_config(MINIMAL, Path::new("/tmp")).unwrap();
        assert_eq!(cfg.experiments.len(), 1);
        assert_eq!(cfg.experiments[0].kind(), "expectation");
        assert_eq!(cfg.sets["poisson"].len(), 1);
        assert_eq!(cfg.output, PathBuf::from("/tmp/out"));
    }

    #[test]
    fn atom_at_origin_rejected() {
        let text = MINIMAL.replace("[[1.0, 1.0]]", "[[0.0, 0.5]]");
        let e = errors(&text);
        assert!(e.iter().any(|m| m.contains("atom at origin")), "{e:?}");
    }

    #[test]
    fn unknown_kind_is_named() {
        let text = MINIMAL.replace("\"expectation\"", "\"bogus\"");
        let e = errors(&text);
        assert!(e[0].contains("bogus"), "{e:?}");
        assert!(e[0].starts_with("line "), "{e:?}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = errors(&MINIMAL.replace("seed = 1", "seed = 1\ncolour = 3"));
        assert!(e[0].contains("colour"), "{e:?}");
    }

    #[test]
    fn dangling_references() {
        let text = MINIMAL.replace("grid = \"unit\"", "grid = \"nope\"");
        assert!(errors(&text)[0].contains("unknown grids entry `nope`"));
        let text = MINIMAL.replace(
            "seed = 1",
            "seed = 1\nreference = { experiment = \"later\" }",
        );
        assert!(errors(&text)[0].contains("not an earlier experiment"));
    }

    #[test]
    fn empty_experiment_list() {
        let cfg = parse_config("", Path::new(".")).unwrap();
        assert!(cfg.experiments.is_empty());
    }

    #[test]
    fn families_expand() {
        let text = r#"
[sets.vol]
family = { base = { vol = 0.5 }, ranges = [{ param = "volatility", lo = 0.5, hi = 1.0 }], resolution = 3 }
"#;
        let cfg = parse_config(text, Path::new(".")).unwrap();
        assert_eq!(cfg.sets["vol"].len(), 3);
    }

    #[test]
    fn tolerance_rule() {
        let t = ToleranceSpec {
            se: 3.0,
            rel: 0.02,
            ..Default::default()
        };
        assert_eq!(t.tolerance(1.0, 0.001, 0.0), 0.02);
        assert_eq!(t.tolerance(1.0, 0.01, 0.0), 0.03);
        assert!(t.passes(1.01, 1.0, 0.02));
        let up = ToleranceSpec {
            side: Side::Upper,
            ..t
        };
        assert!(up.passes(0.5, 1.0, 0.0));
    }
}
