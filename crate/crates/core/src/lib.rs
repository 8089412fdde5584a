//! Numerical toolkit for sublinear expectations of G-Lévy processes with
//! finite activity: uncertainty sets and transport maps, controlled scenario
//! simulation, Monte Carlo upper expectations, the nonlocal HJB solver,
//! pathwise jump-Itô calculus, and SDE/BSDE solvers.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod batch;
pub mod csvfmt;
pub mod error;
pub mod jumpdiff;
pub mod pide;
pub mod scenario;
pub mod stochint;
pub mod sublinear;
pub mod uncertainty;

pub use error::{Error, Result};
pub use pide::{Convention, GridFunction, PideConfig, SpatialGrid};
pub use scenario::{ControlPath, ScenarioPath, Simulator, TimeGrid};
pub use sublinear::{CylinderFunctional, Estimate, EventPredicate};
pub use uncertainty::{JumpMeasure, LevyTriple, TransportMap, UncertaintySet};
