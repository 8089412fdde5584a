//! Uncertainty sets of Lévy triples, the uniform mark measure and the
//! transport maps that push it onto each jump measure.
//!
//! Jump measures are finite atom lists. The reference mark measure is the
//! uniform measure on the unit interval `(0, 1]`, so every measure of total
//! mass at most one is the image of that measure under a piecewise-constant
//! map: atoms receive consecutive cells in stored order and the residual cell
//! maps to the origin.

use std::fmt;

use crate::error::{Error, Result};

/// Tolerance on total mass and on cumulative breakpoints.
pub const MASS_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub location: Vec<f64>,
    pub weight: f64,
}

impl Atom {
    pub fn new(location: Vec<f64>, weight: f64) -> Self {
        Self { location, weight }
    }
}

/// Finite discrete measure on `R^d \ {0}`.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpMeasure {
    dim: usize,
    atoms: Vec<Atom>,
}

impl JumpMeasure {
    /// Builds a measure without checking invariants; see [`JumpMeasure::violations`].
    pub fn new(dim: usize, atoms: Vec<Atom>) -> Self {
        Self { dim, atoms }
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            atoms: Vec::new(),
        }
    }

    pub fn dirac(location: Vec<f64>, weight: f64) -> Self {
        Self {
            dim: location.len(),
            atoms: vec![Atom::new(location, weight)],
        }
    }

    /// One-dimensional measure from `(location, weight)` pairs.
    pub fn scalar(atoms: &[(f64, f64)]) -> Self {
        Self {
            dim: 1,
            atoms: atoms.iter().map(|&(z, w)| Atom::new(vec![z], w)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum()
    }

    pub fn first_moment(&self) -> f64 {
        self.atoms
            .iter()
            .map(|a| a.weight * norm(&a.location))
            .sum()
    }

    /// Mass of the atoms whose location satisfies `pred`.
    pub fn mass_where(&self, pred: impl Fn(&[f64]) -> bool) -> f64 {
        self.atoms
            .iter()
            .filter(|a| pred(&a.location))
            .map(|a| a.weight)
            .sum()
    }

    /// Same atoms with every weight multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            dim: self.dim,
            atoms: self
                .atoms
                .iter()
                .map(|a| Atom::new(a.location.clone(), a.weight * factor))
                .collect(),
        }
    }

    /// Invariant breaches of this measure, in atom order.
    pub fn violations(&self) -> Vec<ViolationKind> {
        let mut out = Vec::new();
        for (i, a) in self.atoms.iter().enumerate() {
            if a.location.len() != self.dim {
                out.push(ViolationKind::DimensionMismatch {
                    what: format!("atom {i}"),
                    expected: self.dim,
                    found: a.location.len(),
                });
                continue;
            }
            if !a.weight.is_finite() || a.location.iter().any(|x| !x.is_finite()) {
                out.push(ViolationKind::NonFinite {
                    what: format!("atom {i}"),
                });
                continue;
            }
            if a.weight < 0.0 {
                out.push(ViolationKind::NegativeWeight { atom: i });
            }
            if a.location.iter().all(|&x| x == 0.0) {
                out.push(ViolationKind::AtomAtOrigin { atom: i });
            }
        }
        let mass = self.total_mass();
        if mass > 1.0 + MASS_TOLERANCE {
            out.push(ViolationKind::MassExceedsUnit { mass });
        }
        if !self.first_moment().is_finite() {
            out.push(ViolationKind::InfiniteMoment);
        }
        out
    }
}

/// One element `(v, p, Q)` of an uncertainty set. `vol` is the row-major
/// `d x d` matrix `Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevyTriple {
    pub measure: JumpMeasure,
    pub drift: Vec<f64>,
    pub vol: Vec<f64>,
}

impl LevyTriple {
    pub fn new(measure: JumpMeasure, drift: Vec<f64>, vol: Vec<f64>) -> Self {
        Self {
            measure,
            drift,
            vol,
        }
    }

    /// Scalar triple `(v, p, sigma)`.
    pub fn scalar(measure: JumpMeasure, drift: f64, sigma: f64) -> Self {
        Self {
            measure,
            drift: vec![drift],
            vol: vec![sigma],
        }
    }

    pub fn dim(&self) -> usize {
        self.drift.len()
    }

    /// `Q Q^T`, row-major.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim();
        let mut c = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for k in 0..d {
                    s += self.vol[i * d + k] * self.vol[j * d + k];
                }
                c[i * d + j] = s;
            }
        }
        c
    }

    pub fn covariance_trace(&self) -> f64 {
        self.vol.iter().map(|q| q * q).sum()
    }

    /// `∫|z| v(dz) + |p| + tr(Q Q^T)`.
    pub fn size(&self) -> f64 {
        self.measure.first_moment() + norm(&self.drift) + self.covariance_trace()
    }
}

/// Finite uncertainty set `U` of Lévy triples.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintySet {
    dim: usize,
    triples: Vec<LevyTriple>,
    drift_free: bool,
}

impl UncertaintySet {
    /// Builds a set; `drift_free` is inferred from the triples. Invariants are
    /// reported by [`validate`], not enforced here.
    pub fn new(triples: Vec<LevyTriple>) -> Self {
        let dim = triples.first().map_or(0, LevyTriple::dim);
        let drift_free = triples.iter().all(|t| t.drift.iter().all(|&p| p == 0.0));
        Self {
            dim,
            triples,
            drift_free,
        }
    }

    /// Declares the set drift free. [`validate`] then requires every drift to be zero.
    pub fn with_drift_free(mut self, flag: bool) -> Self {
        self.drift_free = flag;
        self
    }

    pub fn singleton(triple: LevyTriple) -> Self {
        Self::new(vec![triple])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn drift_free(&self) -> bool {
        self.drift_free
    }

    pub fn triples(&self) -> &[LevyTriple] {
        &self.triples
    }

    pub fn triple(&self, index: usize) -> Result<&LevyTriple> {
        self.triples.get(index).ok_or(Error::ControlOutOfRange {
            index,
            len: self.triples.len(),
        })
    }

    /// `sup_v v(R^d_0)`.
    pub fn max_mass(&self) -> f64 {
        self.triples
            .iter()
            .map(|t| t.measure.total_mass())
            .fold(0.0, f64::max)
    }

    /// The boundedness functional `sup (∫|z|v(dz) + |p| + tr QQ^T)`.
    pub fn bound(&self) -> f64 {
        self.triples
            .iter()
            .map(LevyTriple::size)
            .fold(0.0, f64::max)
    }

    /// Validates and returns the set, or an error listing every violation.
    pub fn validated(self) -> Result<Self> {
        let v = validate(&self);
        if v.is_empty() {
            Ok(self)
        } else {
            let msg: Vec<String> = v.iter().map(ToString::to_string).collect();
            Err(Error::InvalidSet(msg.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    EmptySet,
    AtomAtOrigin {
        atom: usize,
    },
    MassExceedsUnit {
        mass: f64,
    },
    NegativeWeight {
        atom: usize,
    },
    NonFinite {
        what: String,
    },
    InfiniteMoment,
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    DriftNotZero,
    UnboundedSet,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EmptySet => write!(f, "empty uncertainty set"),
            Self::AtomAtOrigin { atom } => write!(f, "atom at origin (atom {atom})"),
            Self::MassExceedsUnit { mass } => {
                write!(f, "mass exceeds normalized λ=1 (total {mass})")
            }
            Self::NegativeWeight { atom } => write!(f, "negative weight (atom {atom})"),
            Self::NonFinite { what } => write!(f, "non-finite value in {what}"),
            Self::InfiniteMoment => write!(f, "first absolute moment is not finite"),
            Self::DimensionMismatch {
                what,
                expected,
                found,
            } => write!(
                f,
                "dimension mismatch in {what}: expected {expected}, found {found}"
            ),
            Self::DriftNotZero => write!(f, "drift must be zero in a drift-free set"),
            Self::UnboundedSet => write!(f, "boundedness functional is not finite"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Index of the offending triple; `None` for set-level violations.
    pub triple: Option<usize>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.triple {
            Some(i) => write!(f, "triple {i}: {}", self.kind),
            None => write!(f, "{}", self.kind),
        }
    }
}

/// Lists every invariant breach of `set`; empty iff the set is well formed.
pub fn validate(set: &UncertaintySet) -> Vec<Violation> {
    let mut out = Vec::new();
    if set.triples.is_empty() {
        out.push(Violation {
            triple: None,
            kind: ViolationKind::EmptySet,
        });
        return out;
    }
    let d = set.dim;
    for (i, t) in set.triples.iter().enumerate() {
        let mut push = |kind| {
            out.push(Violation {
                triple: Some(i),
                kind,
            })
        };
        if t.drift.len() != d {
            push(ViolationKind::DimensionMismatch {
                what: "drift".into(),
                expected: d,
                found: t.drift.len(),
            });
        }
        if t.vol.len() != d * d {
            push(ViolationKind::DimensionMismatch {
                what: "volatility matrix".into(),
                expected: d * d,
                found: t.vol.len(),
            });
        }
        if t.measure.dim() != d {
            push(ViolationKind::DimensionMismatch {
                what: "jump measure".into(),
                expected: d,
                found: t.measure.dim(),
            });
        }
        if t.drift.iter().chain(&t.vol).any(|x| !x.is_finite()) {
            push(ViolationKind::NonFinite {
                what: "drift or volatility".into(),
            });
        }
        for kind in t.measure.violations() {
            push(kind);
        }
        if set.drift_free && t.drift.iter().any(|&p| p != 0.0) {
            push(ViolationKind::DriftNotZero);
        }
    }
    if !set.bound().is_finite() {
        out.push(Violation {
            triple: None,
            kind: ViolationKind::UnboundedSet,
        });
    }
    out
}

/// Piecewise-constant map from the mark interval `(0, 1]` into `R^d`.
///
/// Cell `i` is `(breakpoints[i], breakpoints[i + 1]]` and maps to
/// `values[i]`; marks above the last breakpoint map to the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportMap {
    dim: usize,
    breakpoints: Vec<f64>,
    values: Vec<Vec<f64>>,
    origin: Vec<f64>,
}

impl TransportMap {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// Length of the residual cell mapped to zero.
    pub fn residual_mass(&self) -> f64 {
        1.0 - self.breakpoints.last().copied().unwrap_or(0.0)
    }

    /// `g(mark)`; marks outside `(0, 1]` map to the origin.
    pub fn eval(&self, mark: f64) -> &[f64] {
        if mark <= 0.0 || self.values.is_empty() {
            return &self.origin;
        }
        // first cell whose right end is >= mark
        let right = &self.breakpoints[1..];
        let i = right.partition_point(|&b| b < mark);
        if i < self.values.len() {
            &self.values[i]
        } else {
            &self.origin
        }
    }

    /// Cells as `(left, right, value)`, residual cell included.
    pub fn cells(&self) -> Vec<(f64, f64, &[f64])> {
        let mut out: Vec<(f64, f64, &[f64])> = self
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| (self.breakpoints[i], self.breakpoints[i + 1], v.as_slice()))
            .collect();
        let last = self.breakpoints.last().copied().unwrap_or(0.0);
        if last < 1.0 {
            out.push((last, 1.0, self.origin.as_slice()));
        }
        out
    }

    /// Uniform-measure mass of the marks whose image satisfies `pred`,
    /// ignoring marks mapped to the origin.
    pub fn pushforward_mass(&self, pred: impl Fn(&[f64]) -> bool) -> f64 {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.iter().any(|&x| x != 0.0) && pred(v))
            .map(|(i, _)| self.breakpoints[i + 1] - self.breakpoints[i])
            .sum()
    }
}

/// Inverse-CDF style construction of `g_v`: atoms take consecutive cells in
/// stored order, zero-weight atoms are skipped and the residual maps to 0.
pub fn build_transport_map(v: &JumpMeasure) -> Result<TransportMap> {
    if let Some(kind) = v.violations().into_iter().next() {
        return Err(Error::InvalidMeasure(kind.to_string()));
    }
    let mut breakpoints = vec![0.0];
    let mut values = Vec::new();
    let mut acc = 0.0;
    for a in v.atoms() {
        if a.weight == 0.0 {
            continue;
        }
        acc += a.weight;
        breakpoints.push(acc.min(1.0));
        values.push(a.location.clone());
    }
    Ok(TransportMap {
        dim: v.dim(),
        breakpoints,
        values,
        origin: vec![0.0; v.dim()],
    })
}

/// Parameter of a family that varies over an interval.
#[derive(Debug, Clone, PartialEq)]
pub enum FamilyParam {
    /// Multiplies every weight of the base measure.
    Intensity,
    /// Sets entry `(row, col)` of the volatility matrix.
    Volatility { row: usize, col: usize },
    /// Sets one component of the drift.
    Drift { component: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRange {
    pub param: FamilyParam,
    pub lo: f64,
    pub hi: f64,
}

impl ParamRange {
    pub fn new(param: FamilyParam, lo: f64, hi: f64) -> Self {
        Self { param, lo, hi }
    }
}

/// Interval-parameterized family around a base triple.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyDescriptor {
    pub base: LevyTriple,
    pub ranges: Vec<ParamRange>,
}

/// Finite grid over the family: `resolution` points per free parameter,
/// endpoints included, first parameter varying slowest. Duplicate triples
/// (degenerate intervals) are collapsed.
pub fn expand_family(desc: &FamilyDescriptor, resolution: usize) -> Result<UncertaintySet> {
    if resolution < 2 {
        return Err(Error::InvalidFamily(format!(
            "resolution must be at least 2, got {resolution}"
        )));
    }
    let d = desc.base.dim();
    let mut axes = Vec::with_capacity(desc.ranges.len());
    for r in &desc.ranges {
        if !(r.lo.is_finite() && r.hi.is_finite()) || r.lo > r.hi {
            return Err(Error::InvalidFamily(format!(
                "empty interval [{}, {}] for {:?}",
                r.lo, r.hi, r.param
            )));
        }
        match r.param {
            FamilyParam::Volatility { row, col } if row >= d || col >= d => {
                return Err(Error::InvalidFamily(format!(
                    "volatility entry ({row}, {col}) outside a {d}x{d} matrix"
                )))
            }
            FamilyParam::Drift { component } if component >= d => {
                return Err(Error::InvalidFamily(format!(
                    "drift component {component} outside dimension {d}"
                )))
            }
            _ => {}
        }
        let pts: Vec<f64> = (0..resolution)
            .map(|i| {
                if i + 1 == resolution {
                    r.hi
                } else {
                    r.lo + (r.hi - r.lo) * i as f64 / (resolution - 1) as f64
                }
            })
            .collect();
        axes.push(pts);
    }

    let mut triples: Vec<LevyTriple> = Vec::new();
    let mut idx = vec![0usize; axes.len()];
    loop {
        let mut t = desc.base.clone();
        for (k, r) in desc.ranges.iter().enumerate() {
            let x = axes[k][idx[k]];
            match r.param {
                FamilyParam::Intensity => t.measure = desc.base.measure.scaled(x),
                FamilyParam::Volatility { row, col } => t.vol[row * d + col] = x,
                FamilyParam::Drift { component } => t.drift[component] = x,
            }
        }
        if !triples.contains(&t) {
            triples.push(t);
        }
        // odometer, last axis fastest
        let mut k = axes.len();
        loop {
            if k == 0 {
                return Ok(UncertaintySet::new(triples));
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < resolution {
                break;
            }
            idx[k] = 0;
        }
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poisson() -> LevyTriple {
        LevyTriple::scalar(JumpMeasure::scalar(&[(1.0, 1.0)]), 0.0, 0.0)
    }

    #[test]
    fn singleton_poisson_is_valid() {
        assert!(validate(&UncertaintySet::singleton(poisson())).is_empty());
    }

    #[test]
    fn atom_at_origin_is_reported() {
        let t = LevyTriple::scalar(JumpMeasure::scalar(&[(0.0, 0.5)]), 0.0, 0.0);
        let v = validate(&UncertaintySet::singleton(t));
        assert_eq!(v.len(), 1);
        assert!(v[0].to_string().contains("atom at origin"));
        assert_eq!(v[0].triple, Some(0));
    }

    #[test]
    fn excess_mass_is_reported() {
        let t = LevyTriple::scalar(JumpMeasure::scalar(&[(1.0, 1.3)]), 0.0, 0.0);
        let v = validate(&UncertaintySet::singleton(t));
        assert_eq!(v.len(), 1);
        assert!(v[0].to_string().contains("mass exceeds normalized λ=1"));
    }

    #[test]
    fn empty_set_and_drift_flag() {
        assert_eq!(validate(&UncertaintySet::new(vec![])).len(), 1);
        let t = LevyTriple::scalar(JumpMeasure::zero(1), 0.3, 0.0);
        let set = UncertaintySet::singleton(t).with_drift_free(true);
        let v = validate(&set);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::DriftNotZero);
    }

    #[test]
    fn partial_mass_map() {
        let g = build_transport_map(&JumpMeasure::scalar(&[(1.0, 0.6)])).unwrap();
        assert_eq!(g.eval(0.3), &[1.0]);
        assert_eq!(g.eval(0.6), &[1.0]);
        assert_eq!(g.eval(0.6000001), &[0.0]);
        assert_eq!(g.eval(1.0), &[0.0]);
        assert!((g.residual_mass() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn full_mass_map() {
        let g = build_transport_map(&JumpMeasure::scalar(&[(1.0, 1.0)])).unwrap();
        for m in [1e-9, 0.5, 1.0] {
            assert_eq!(g.eval(m), &[1.0]);
        }
        assert_eq!(g.residual_mass(), 0.0);
    }

    #[test]
    fn zero_measure_map() {
        let g = build_transport_map(&JumpMeasure::zero(1)).unwrap();
        assert_eq!(g.eval(0.5), &[0.0]);
        assert_eq!(g.cells().len(), 1);
    }

    #[test]
    fn map_rejects_excess_mass() {
        let err = build_transport_map(&JumpMeasure::scalar(&[(1.0, 0.7), (2.0, 0.7)]));
        assert!(matches!(err, Err(Error::InvalidMeasure(_))));
    }

    #[test]
    fn intensity_family_endpoints() {
        let desc = FamilyDescriptor {
            base: poisson(),
            ranges: vec![ParamRange::new(FamilyParam::Intensity, 0.5, 1.0)],
        };
        let set = expand_family(&desc, 2).unwrap();
        let masses: Vec<f64> = set
            .triples()
            .iter()
            .map(|t| t.measure.total_mass())
            .collect();
        assert_eq!(masses, vec![0.5, 1.0]);
        assert!(set.drift_free());
        assert!(validate(&set).is_empty());
    }

    #[test]
    fn volatility_family_grid() {
        let desc = FamilyDescriptor {
            base: LevyTriple::scalar(JumpMeasure::zero(1), 0.0, 0.0),
            ranges: vec![ParamRange::new(
                FamilyParam::Volatility { row: 0, col: 0 },
                0.5,
                1.0,
            )],
        };
        let set = expand_family(&desc, 3).unwrap();
        let q: Vec<f64> = set.triples().iter().map(|t| t.vol[0]).collect();
        assert_eq!(q, vec![0.5, 0.75, 1.0]);
    }

    #[test]
    fn degenerate_interval_is_singleton() {
        let desc = FamilyDescriptor {
            base: poisson(),
            ranges: vec![ParamRange::new(FamilyParam::Intensity, 1.0, 1.0)],
        };
        assert_eq!(expand_family(&desc, 2).unwrap().len(), 1);
    }

    #[test]
    fn family_errors() {
        let mut desc = FamilyDescriptor {
            base: poisson(),
            ranges: vec![ParamRange::new(FamilyParam::Intensity, 1.0, 0.5)],
        };
        assert!(expand_family(&desc, 2).is_err());
        desc.ranges[0] = ParamRange::new(FamilyParam::Intensity, 0.5, 1.0);
        assert!(expand_family(&desc, 1).is_err());
    }

    #[test]
    fn two_parameter_family_is_cartesian() {
        let desc = FamilyDescriptor {
            base: poisson(),
            ranges: vec![
                ParamRange::new(FamilyParam::Intensity, 0.5, 1.0),
                ParamRange::new(FamilyParam::Volatility { row: 0, col: 0 }, 0.0, 0.4),
            ],
        };
        let set = expand_family(&desc, 3).unwrap();
        assert_eq!(set.len(), 9);
        assert_eq!(set.triples()[1].vol[0], 0.2);
        assert_eq!(set.triples()[3].measure.total_mass(), 0.75);
    }
}
