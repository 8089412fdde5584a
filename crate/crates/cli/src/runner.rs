//! Executes the experiments of a validated configuration in declared order.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;
use std::time::Instant;

use glevy_core::csvfmt::fmt12;
use glevy_core::jumpdiff::{
    picard_sde, sde_upper_expectation, solve_bsde, solve_fbsde, BsdeSpec, FbsdeSettings, FbsdeSpec,
    ForwardSpec, Lipschitz, SdeSpec,
};
use glevy_core::pide::{check_dpp, solve_pide, viscosity_residual, DppReport, DppSettings};
use glevy_core::stochint::{
    asymmetry_witness, continuity_bound_check, ito_formula_residual, ito_jump_integral, Affine,
    C2Function, ElementaryProcess, ItoLevyComponents, Kernel, SimpleIntegrand, SineSum,
    SquaredNorm, ValueShape,
};
use glevy_core::sublinear::{
    axiom_check, estimate_capacity, estimate_upper_expectation, evaluate_cylinder, AxiomStatus,
    MonteCarlo,
};
use glevy_core::{
    ControlPath, Convention, CylinderFunctional, EventPredicate, GridFunction, PideConfig,
    Simulator, SpatialGrid, TimeGrid, UncertaintySet,
};

use crate::config::*;
use crate::corpus::random_integrand;
use crate::error::CliError;
use crate::report::{Detail, Row, RunReport};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Report only this experiment (its dependencies still run).
    pub filter: Option<String>,
    /// 0 quiet, 1 progress, 2 per-row detail on stderr.
    pub verbosity: u8,
}

type Res<T> = glevy_core::Result<T>;

/// One summary row before timing is attached.
struct Check {
    suffix: Option<String>,
    value: f64,
    std_error: Option<f64>,
    tolerance: Option<f64>,
    pass: bool,
}

impl Check {
    fn info(value: f64, std_error: Option<f64>) -> Self {
        Self {
            suffix: None,
            value,
            std_error,
            tolerance: None,
            pass: true,
        }
    }

    fn named(mut self, suffix: impl Into<String>) -> Self {
        self.suffix = Some(suffix.into());
        self
    }
}

#[derive(Default)]
struct Outcome {
    checks: Vec<Check>,
    details: Vec<Detail>,
    /// Headline value other experiments may reference.
    value: f64,
    field: Option<GridFunction>,
}

struct Runner<'c> {
    cfg: &'c ExperimentConfig,
    values: HashMap<String, f64>,
    fields: HashMap<String, GridFunction>,
}

/// Runs every experiment (or the filtered one and its dependencies) and
/// collects the report rows in declared order.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport, CliError> {
    let selected: Option<HashSet<String>> = match &opts.filter {
        None => None,
        Some(id) => {
            if !cfg.experiments.iter().any(|e| e.id() == id) {
                return Err(CliError::Config(vec![format!(
                    "no experiment with id `{id}`"
                )]));
            }
            let mut need = HashSet::from([id.clone()]);
            for e in cfg.experiments.iter().rev() {
                if need.contains(e.id()) {
                    need.extend(cfg.dependencies(e));
                }
            }
            Some(need)
        }
    };
    let mut runner = Runner {
        cfg,
        values: HashMap::new(),
        fields: HashMap::new(),
    };
    let mut report = RunReport::default();
    for e in &cfg.experiments {
        let id = e.id();
        if selected.as_ref().is_some_and(|s| !s.contains(id)) {
            continue;
        }
        if opts.verbosity > 0 {
            eprintln!("[{id}] {} ...", e.kind());
        }
        let start = Instant::now();
        let out = runner
            .experiment(e)
            .map_err(|source| CliError::Experiment {
                id: id.to_string(),
                source,
            })?;
        let seconds = start.elapsed().as_secs_f64();
        runner.values.insert(id.to_string(), out.value);
        if let Some(f) = out.field {
            runner.fields.insert(id.to_string(), f);
        }
        if opts.filter.as_ref().is_some_and(|f| f != id) {
            continue;
        }
        for c in out.checks {
            let row = Row {
                experiment_id: match &c.suffix {
                    Some(s) => format!("{id}:{s}"),
                    None => id.to_string(),
                },
                kind: e.kind(),
                value: c.value,
                std_error: c.std_error,
                tolerance: c.tolerance,
                pass: c.pass,
                seconds,
            };
            if opts.verbosity > 1 || (opts.verbosity > 0 && !row.pass) {
                eprintln!(
                    "  {} value={} se={:?} tol={:?} pass={}",
                    row.experiment_id, row.value, row.std_error, row.tolerance, row.pass
                );
            }
            report.rows.push(row);
        }
        report.details.extend(out.details);
    }
    Ok(report)
}

// ------------------------------------------------------------- helpers

fn functional(spec: &FunctionalSpec, grid: &TimeGrid) -> Res<CylinderFunctional> {
    let times = spec
        .times
        .clone()
        .unwrap_or_else(|| vec![grid.t_end() - grid.t0()]);
    let n = times.len().max(1) as f64;
    let (b, l) = spec.payoff.constants();
    let scale = spec.scale;
    let payoff = spec.payoff;
    let (bound, lip) = match spec.observe {
        Observe::Level => (b, l * n.sqrt()),
        Observe::Increments => (b * n, l * n.sqrt()),
    };
    let bound = spec.bound.unwrap_or(bound * scale.abs());
    let lip = spec.lipschitz.unwrap_or(lip * scale.abs());
    match spec.observe {
        Observe::Level => CylinderFunctional::new(
            1,
            times,
            move |x| scale * payoff.eval(x.iter().sum()),
            bound,
            lip,
        ),
        Observe::Increments => CylinderFunctional::new(
            1,
            times,
            move |x| scale * x.iter().map(|&v| payoff.eval(v)).sum::<f64>(),
            bound,
            lip,
        ),
    }
}

fn event(spec: EventSpec) -> EventPredicate {
    match spec {
        EventSpec::NoJumpUntil { t } => EventPredicate::no_jump_until(t),
        EventSpec::JumpsWithin { gap } => EventPredicate::jumps_within(gap),
        EventSpec::AtLeastJumps { count } => EventPredicate::at_least_jumps(count),
    }
}

fn kernel(spec: KernelSpec) -> Kernel {
    match spec {
        KernelSpec::Linear { slope } => Kernel::linear(slope),
        KernelSpec::Tent {
            center,
            half_width,
            height,
        } => Kernel::tent(center, half_width, height),
        KernelSpec::Indicator { lo, hi, height } => Kernel::custom(
            format!("indicator({lo},{hi},{height})"),
            Some((lo, hi)),
            move |z| {
                if z[0] != 0.0 && z[0] >= lo && z[0] <= hi {
                    height
                } else {
                    0.0
                }
            },
        ),
    }
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if ys.is_empty() {
        return 0.0;
    }
    if x <= xs[0] {
        return ys[0];
    }
    let last = xs.len() - 1;
    if x >= xs[last] {
        return ys[last];
    }
    let i = xs.partition_point(|&v| v <= x) - 1;
    let w = (x - xs[i]) / (xs[i + 1] - xs[i]);
    ys[i] + w * (ys[i + 1] - ys[i])
}

fn slope_bound(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| ((y[1] - y[0]) / (x[1] - x[0])).abs())
        .fold(0.0, f64::max)
}

fn sde_spec(spec: &SdeSpecConfig) -> Res<SdeSpec> {
    Ok(match spec {
        SdeSpecConfig::Linear { a } => SdeSpec::linear(*a),
        SdeSpecConfig::Doubling => SdeSpec::doubling(),
        SdeSpecConfig::Identity => SdeSpec::identity(),
        SdeSpecConfig::Tabulated { x, b, h, sigma, k } => {
            if x.len() < 2 || x.windows(2).any(|w| w[0] >= w[1]) {
                return Err(glevy_core::Error::InvalidArgument(
                    "tabulated x must be increasing with 2+ points".into(),
                ));
            }
            for (name, col) in [("b", b), ("h", h), ("sigma", sigma), ("k", k)] {
                if !col.is_empty() && col.len() != x.len() {
                    return Err(glevy_core::Error::InvalidArgument(format!(
                        "tabulated {name} needs {} values",
                        x.len()
                    )));
                }
            }
            let lip = Lipschitz {
                b: slope_bound(x, b),
                h: slope_bound(x, h),
                sigma: slope_bound(x, sigma),
                k: slope_bound(x, k),
            };
            let (xb, xh, xs, xk) = (x.clone(), x.clone(), x.clone(), x.clone());
            let (b, h, sigma, k) = (b.clone(), h.clone(), sigma.clone(), k.clone());
            SdeSpec::scalar(
                move |y| interp(&xb, &b, y),
                move |y| interp(&xh, &h, y),
                move |y| interp(&xs, &sigma, y),
                move |y, z| interp(&xk, &k, y) * z,
                lip,
            )
        }
    })
}

fn forward(spec: ForwardSpecConfig) -> ForwardSpec {
    match spec {
        ForwardSpecConfig::Identity => ForwardSpec::identity(),
        ForwardSpecConfig::Affine { a, sigma, kappa } => ForwardSpec::new(
            move |x| a * x,
            |_| 0.0,
            move |_| sigma,
            move |_, z| kappa * z,
            Lipschitz {
                b: a.abs(),
                ..Lipschitz::default()
            },
        ),
    }
}

fn convention(c: ConventionSpec) -> Convention {
    match c {
        ConventionSpec::Initial => Convention::Initial,
        ConventionSpec::Terminal => Convention::Terminal,
    }
}

/// Value of `u` at time 0 and state `x`.
fn value_at_start(u: &GridFunction, x: f64) -> f64 {
    let k = match u.convention() {
        Convention::Terminal => 0,
        Convention::Initial => u.levels() - 1,
    };
    u.grid().interpolate(u.level(k), x)
}

fn bool_str(b: bool) -> String {
    b.to_string()
}

impl Runner<'_> {
    fn set(&self, name: &str) -> &UncertaintySet {
        &self.cfg.sets[name]
    }

    fn grid(&self, name: &str) -> TimeGrid {
        self.cfg.grids[name]
    }

    fn space(&self, name: &str) -> SpatialGrid {
        self.cfg.spaces[name]
    }

    fn controls(&self, name: &str, set: &UncertaintySet) -> Res<Vec<ControlPath>> {
        match &self.cfg.controls[name] {
            ControlSpec::Constants => Ok(ControlPath::all_constants(set)),
            ControlSpec::Indices { indices } => {
                for &i in indices {
                    set.triple(i)?;
                }
                Ok(indices.iter().map(|&i| ControlPath::constant(i)).collect())
            }
            ControlSpec::PideFeedback {
                experiment,
                x0,
                with_constants,
            } => {
                let mut out = if *with_constants {
                    ControlPath::all_constants(set)
                } else {
                    Vec::new()
                };
                out.push(self.fields[experiment].feedback_control(*x0)?);
                Ok(out)
            }
        }
    }

    fn reference(&self, r: &Reference) -> f64 {
        match r {
            Reference::Value(v) => *v,
            Reference::Oracle(o) => o.value(),
            Reference::Experiment { experiment } => self.values[experiment],
        }
    }

    /// Compares `value` with the optional reference.
    fn compare(
        &self,
        value: f64,
        std_error: Option<f64>,
        reference: Option<&Reference>,
        tol: &ToleranceSpec,
        dt: f64,
    ) -> Check {
        match reference {
            None => Check::info(value, std_error),
            Some(r) => {
                let target = self.reference(r);
                let tolerance = tol.tolerance(target, std_error.unwrap_or(0.0), dt);
                Check {
                    suffix: None,
                    value,
                    std_error,
                    tolerance: Some(tolerance),
                    pass: tol.passes(value, target, tolerance),
                }
            }
        }
    }

    fn experiment(&self, e: &Experiment) -> Res<Outcome> {
        match e {
            Experiment::Expectation(p) => self.expectation(p),
            Experiment::Pide(p) => self.pide(p),
            Experiment::Dpp(p) => self.dpp(p),
            Experiment::Capacity(p) => self.capacity(p),
            Experiment::Axioms(p) => self.axioms(p),
            Experiment::ItoIntegral(p) => self.ito_integral(p),
            Experiment::ItoFormula(p) => self.ito_formula(p),
            Experiment::ContinuityBound(p) => self.continuity(p),
            Experiment::Sde(p) => self.sde(p),
            Experiment::Picard(p) => self.picard(p),
            Experiment::Bsde(p) => self.bsde(p),
            Experiment::Fbsde(p) => self.fbsde(p),
        }
    }

    fn expectation(&self, p: &ExpectationParams) -> Res<Outcome> {
        let set = self.set(&p.set);
        let grid = self.grid(&p.grid);
        let xi = functional(&p.functional, &grid)?;
        let (value, se, dt) = match p.method {
            Method::Mc => {
                let controls = self.controls(&p.controls, set)?;
                let est =
                    estimate_upper_expectation(&xi, set, &controls, &grid, p.samples, p.seed)?;
                (est.value, Some(est.std_error), grid.dt())
            }
            Method::Cylinder => {
                let (space, max_dt) = match (&p.space, p.max_dt) {
                    (Some(s), Some(dt)) => (self.space(s), dt),
                    _ => {
                        return Err(glevy_core::Error::InvalidArgument(
                            "the cylinder method needs `space` and `max_dt`".into(),
                        ))
                    }
                };
                (
                    evaluate_cylinder(&xi, set, &PideConfig::new(space, max_dt))?,
                    None,
                    max_dt,
                )
            }
        };
        Ok(Outcome {
            checks: vec![self.compare(value, se, p.reference.as_ref(), &p.tolerance, dt)],
            value,
            ..Outcome::default()
        })
    }

    fn pide(&self, p: &PideParams) -> Res<Outcome> {
        let set = self.set(&p.set);
        let payoff = p.payoff;
        let u = solve_pide(
            &|x| payoff.eval(x),
            p.horizon,
            self.space(&p.space),
            p.steps,
            set,
            convention(p.convention),
        )?;
        let value = value_at_start(&u, p.x0);
        let mut checks =
            vec![self.compare(value, None, p.reference.as_ref(), &p.tolerance, u.dt())];
        if let Some(v) = &p.viscosity {
            let panel: Vec<(f64, f64)> = v.panel.iter().map(|a| (a[0], a[1])).collect();
            let r = viscosity_residual(&u, set, &panel, v.constant)?;
            let worst = r
                .points
                .iter()
                .max_by(|a, b| (a.residual - a.tolerance).total_cmp(&(b.residual - b.tolerance)));
            checks.push(Check {
                suffix: Some("viscosity".into()),
                value: r.max_residual(),
                std_error: None,
                tolerance: worst.map(|w| w.tolerance),
                pass: r.passed(),
            });
        }
        let mut buf = Vec::new();
        u.write_csv_every(&mut buf, p.detail_every)
            .expect("writing to memory cannot fail");
        let detail = Detail {
            name: p.id.clone(),
            contents: String::from_utf8(buf).expect("CSV is ASCII"),
        };
        Ok(Outcome {
            checks,
            details: vec![detail],
            value,
            field: Some(u),
        })
    }

    fn dpp_panel(
        &self,
        p: &DppParams,
        space: SpatialGrid,
        steps: usize,
        controls: &[ControlPath],
    ) -> Res<Vec<DppReport>> {
        let set = self.set(&p.set);
        let payoff = p.payoff;
        let u = solve_pide(
            &|x| payoff.eval(x),
            p.horizon,
            space,
            steps,
            set,
            Convention::Terminal,
        )?;
        let panel: Vec<(f64, f64)> = p.panel.iter().map(|a| (a[0], a[1])).collect();
        p.h.iter()
            .map(|&h| {
                let settings = DppSettings {
                    h,
                    samples: p.samples,
                    seed: p.seed,
                    constant: p.constant,
                };
                check_dpp(&u, set, controls, &panel, settings)
            })
            .collect()
    }

    fn dpp(&self, p: &DppParams) -> Res<Outcome> {
        let set = self.set(&p.set);
        let controls = self.controls(&p.controls, set)?;
        let coarse = self.dpp_panel(p, self.space(&p.space), p.steps, &controls)?;
        let mut detail = Detail::new(
            &p.id,
            "grid,h,t,x,lhs,rhs,std_error,residual,tolerance,pass",
        );
        let mut checks = Vec::new();
        let mut emit = |label: &str, reports: &[DppReport], checks: &mut Vec<Check>, rows: bool| {
            for r in reports {
                for pt in &r.points {
                    detail.row(&[
                        label.to_string(),
                        fmt12(r.h),
                        fmt12(pt.t),
                        fmt12(pt.x),
                        fmt12(pt.lhs),
                        fmt12(pt.rhs),
                        fmt12(pt.std_error),
                        fmt12(pt.residual),
                        fmt12(pt.tolerance),
                        bool_str(pt.passed()),
                    ]);
                }
                if !rows {
                    continue;
                }
                // report the point closest to (or furthest past) its tolerance
                if let Some(w) = r.points.iter().max_by(|a, b| {
                    (a.residual / a.tolerance).total_cmp(&(b.residual / b.tolerance))
                }) {
                    checks.push(Check {
                        suffix: Some(format!("{label}:h={}", fmt12(r.h))),
                        value: w.residual,
                        std_error: Some(w.std_error),
                        tolerance: Some(w.tolerance),
                        pass: r.passed(),
                    });
                }
            }
        };
        emit("coarse", &coarse, &mut checks, true);
        let mean = |rs: &[DppReport]| {
            let all: Vec<f64> = rs
                .iter()
                .flat_map(|r| r.points.iter().map(|p| p.residual))
                .collect();
            all.iter().sum::<f64>() / all.len().max(1) as f64
        };
        let mut value = mean(&coarse);
        if let Some(refine) = &p.refine {
            let fine = self.dpp_panel(p, self.space(&refine.space), refine.steps, &controls)?;
            emit("fine", &fine, &mut checks, true);
            let (mc, mf) = (mean(&coarse), mean(&fine));
            checks.push(Check {
                suffix: Some("refinement".into()),
                value: mf,
                std_error: None,
                tolerance: Some(mc),
                pass: mf <= mc,
            });
            value = mf;
        }
        Ok(Outcome {
            checks,
            details: vec![detail],
            value,
            ..Outcome::default()
        })
    }

    fn capacity(&self, p: &CapacityParams) -> Res<Outcome> {
        let set = self.set(&p.set);
        let grid = self.grid(&p.grid);
        let controls = self.controls(&p.controls, set)?;
        let est = estimate_capacity(&event(p.event), set, &controls, &grid, p.samples, p.seed)?;
        Ok(Outcome {
            checks: vec![self.compare(
                est.value,
                Some(est.std_error),
                p.reference.as_ref(),
                &p.tolerance,
                grid.dt(),
            )],
            value: est.value,
            ..Outcome::default()
        })
    }

    fn axioms(&self, p: &AxiomsParams) -> Res<Outcome> {
        let set = self.set(&p.set);
        let grid = self.grid(&p.grid);
        let controls = self.controls(&p.controls, set)?;
        let fs = p
            .functionals
            .iter()
            .map(|f| functional(f, &grid))
            .collect::<Res<Vec<_>>>()?;
        let n = fs.len();
        let pairs: Vec<_> = (0..n)
            .map(|i| (fs[i].clone(), fs[(i + 1) % n].clone()))
            .collect();
        let report = axiom_check(&pairs, p.lambda, set, &controls, &grid, p.samples, p.seed)?;
        let mut detail = Detail::new(&p.id, "pair,axiom,status,lhs,rhs,tolerance");
        for pair in &report.pairs {
            for (name, o) in pair.outcomes() {
                let status = match o.status {
                    AxiomStatus::Pass => "pass",
                    AxiomStatus::Fail => "fail",
                    AxiomStatus::NotApplicable => "n/a",
                };
                detail.row(&[
                    pair.pair.to_string(),
                    name.to_string(),
                    status.to_string(),
                    fmt12(o.lhs),
                    fmt12(o.rhs),
                    fmt12(o.tolerance),
                ]);
            }
        }
        let failures = report.failures().len() as f64;
        Ok(Outcome {
            checks: vec![Check {
                suffix: None,
                value: failures,
                std_error: None,
                tolerance: Some(0.0),
                pass: failures == 0.0,
            }],
            details: vec![detail],
            value: failures,
            ..Outcome::default()
        })
    }

    fn ito_integral(&self, p: &ItoIntegralParams) -> Res<Outcome> {
        let set = self.set(&p.set);
        let grid = self.grid(&p.grid);
        let controls = self.controls(&p.controls, set)?;
        let k = SimpleIntegrand::deterministic(grid.t0(), grid.t_end(), kernel(p.kernel))?;
        let check = match p.check {
            IntegralCheck::Expectation => {
                let mc = MonteCarlo::new(set, grid, p.samples, p.seed)?;
                let (s, t, power) = (grid.t0(), grid.t_end(), p.power as i32);
                let est = mc.upper(&controls, |path| {
                    Ok(ito_jump_integral(&k, path, s, t)?.powi(power))
                })?;
                self.compare(
                    est.value,
                    Some(est.std_error),
                    p.reference.as_ref(),
                    &p.tolerance,
                    grid.dt(),
                )
            }
            IntegralCheck::Asymmetry => {
                let w = asymmetry_witness(&k, set, &controls, &grid, p.samples, p.seed)?;
                // pass means the gap exceeds the tolerance
                Check {
                    suffix: Some("asymmetry".into()),
                    value: w.upper + w.upper_of_negative,
                    std_error: Some(w.std_error),
                    tolerance: Some(6.0 * w.std_error),
                    pass: w.asymmetric,
                }
            }
        };
        let value = check.value;
        Ok(Outcome {
            checks: vec![check],
            value,
            ..Outcome::default()
        })
    }

    fn continuity(&self, p: &ContinuityParams) -> Res<Outcome> {
        let grid = self.grid(&p.grid);
        let corpus = (0..p.corpus as u64)
            .map(|i| random_integrand(p.corpus_seed, i, &grid))
            .collect::<Res<Vec<_>>>()?;
        let mut detail = Detail::new(
            &p.id,
            "set,integrand,lhs,lhs_std_error,norm_squared,rhs,tolerance,pass",
        );
        let mut violations = 0usize;
        for name in &p.sets {
            let set = self.set(name);
            let controls = ControlPath::all_constants(set);
            for (i, k) in corpus.iter().enumerate() {
                let c = continuity_bound_check(k, set, &controls, &grid, p.samples, p.seed)?;
                violations += usize::from(!c.pass);
                detail.row(&[
                    name.clone(),
                    i.to_string(),
                    fmt12(c.lhs),
                    fmt12(c.lhs_std_error),
                    fmt12(c.norm_squared),
                    fmt12(c.rhs),
                    fmt12(c.tolerance),
                    bool_str(c.pass),
                ]);
            }
        }
        let v = violations as f64;
        Ok(Outcome {
            checks: vec![Check {
                suffix: None,
                value: v,
                std_error: None,
                tolerance: Some(0.0),
                pass: violations == 0,
            }],
            details: vec![detail],
            value: v,
            ..Outcome::default()
        })
    }

    fn ito_formula(&self, p: &ItoFormulaParams) -> Res<Outcome> {
        let set = self.set(&p.set);
        let grid = self.grid(&p.grid);
        let (t0, t1) = (grid.t0(), grid.t_end());
        let comps = ItoLevyComponents {
            y0: vec![p.y0],
            alpha: vec![ElementaryProcess::constant(
                1,
                ValueShape::Scalar,
                t0,
                t1,
                &[p.alpha],
            )?],
            beta: vec![ElementaryProcess::constant(
                1,
                ValueShape::Matrix,
                t0,
                t1,
                &[p.beta],
            )?],
            z: vec![ElementaryProcess::constant(
                1,
                ValueShape::Vector,
                t0,
                t1,
                &[p.z],
            )?],
            k: vec![match p.kernel {
                Some(k) => SimpleIntegrand::deterministic(t0, t1, kernel(k))?,
                None => SimpleIntegrand::zero(t0, t1)?,
            }],
        };
        let f: Box<dyn C2Function> = match p.f {
            TestFunction::Square => Box::new(SquaredNorm),
            TestFunction::Sine => Box::new(SineSum),
            TestFunction::Affine { a, b } => Box::new(Affine { a: vec![a], b }),
        };
        let residuals = |grid: TimeGrid| -> Res<Vec<f64>> {
            let sim = Simulator::new(set, grid)?;
            let control = ControlPath::constant(0);
            glevy_core::batch::map_replicates(p.paths, |r| {
                let path = sim.path(&control, p.seed, r)?;
                ito_formula_residual(&*f, &comps, &path)
            })
        };
        let rms = |r: &[f64]| (r.iter().map(|x| x * x).sum::<f64>() / r.len().max(1) as f64).sqrt();
        let mut detail = Detail::new(&p.id, "steps,max_residual,rms_residual");
        let check = match p.check {
            ItoCheck::Exact { tolerance } => {
                let r = residuals(grid)?;
                let max = r.iter().fold(0.0f64, |a, &b| a.max(b));
                detail.row(&[grid.steps().to_string(), fmt12(max), fmt12(rms(&r))]);
                Check {
                    suffix: None,
                    value: max,
                    std_error: None,
                    tolerance: Some(tolerance),
                    pass: max <= tolerance,
                }
            }
            ItoCheck::Halving { target, band } => {
                let fine = TimeGrid::new(t0, t1, 2 * grid.steps())?;
                let (rc, rf) = (residuals(grid)?, residuals(fine)?);
                for (g, r) in [(grid, &rc), (fine, &rf)] {
                    let max = r.iter().fold(0.0f64, |a, &b| a.max(b));
                    detail.row(&[g.steps().to_string(), fmt12(max), fmt12(rms(r))]);
                }
                let ratio = rms(&rf) / rms(&rc);
                let tolerance = band * target;
                Check {
                    suffix: None,
                    value: ratio,
                    std_error: None,
                    tolerance: Some(tolerance),
                    pass: (ratio - target).abs() <= tolerance,
                }
            }
        };
        let value = check.value;
        Ok(Outcome {
            checks: vec![check],
            details: vec![detail],
            value,
            ..Outcome::default()
        })
    }

    fn sde(&self, p: &SdeParams) -> Res<Outcome> {
        let set = self.set(&p.set);
        let grid = self.grid(&p.grid);
        let controls = self.controls(&p.controls, set)?;
        let spec = sde_spec(&p.sde)?;
        let payoff = p.payoff;
        let check = match p.check {
            SdeCheck::Expectation => {
                let est = sde_upper_expectation(
                    &spec,
                    &[p.y0],
                    &|y| payoff.eval(y[0]),
                    set,
                    &controls,
                    &grid,
                    p.samples,
                    p.seed,
                )?;
                self.compare(
                    est.value,
                    Some(est.std_error),
                    p.reference.as_ref(),
                    &p.tolerance,
                    grid.dt(),
                )
            }
            SdeCheck::EulerOrder => {
                let target = match &p.reference {
                    Some(r) => self.reference(r),
                    None => {
                        return Err(glevy_core::Error::InvalidArgument(
                            "the Euler order check needs a reference".into(),
                        ))
                    }
                };
                let error = |g: TimeGrid| -> Res<f64> {
                    let est = sde_upper_expectation(
                        &spec,
                        &[p.y0],
                        &|y| (payoff.eval(y[0]) - target).abs(),
                        set,
                        &controls,
                        &g,
                        p.samples,
                        p.seed,
                    )?;
                    Ok(est.value)
                };
                let coarse = error(grid)?;
                let fine = error(TimeGrid::new(grid.t0(), grid.t_end(), 2 * grid.steps())?)?;
                let order = (coarse / fine).log2();
                // pass means the observed order reaches the declared minimum
                Check {
                    suffix: Some("order".into()),
                    value: order,
                    std_error: None,
                    tolerance: Some(p.min_order),
                    pass: order >= p.min_order,
                }
            }
        };
        let value = check.value;
        Ok(Outcome {
            checks: vec![check],
            value,
            ..Outcome::default()
        })
    }

    fn picard(&self, p: &PicardParams) -> Res<Outcome> {
        let set = self.set(&p.set);
        let grid = self.grid(&p.grid);
        let controls = self.controls(&p.controls, set)?;
        let spec = sde_spec(&p.sde)?;
        let r = picard_sde(
            &spec,
            &[p.y0],
            set,
            &controls,
            &grid,
            p.samples,
            p.iterations,
            p.seed,
        )?;
        let mut detail = Detail::new(&p.id, "k,distance,ratio");
        for (k, d) in r.distances.iter().enumerate() {
            let ratio = if k == 0 {
                String::new()
            } else {
                fmt12(r.ratios[k - 1])
            };
            detail.row(&[(k + 1).to_string(), fmt12(*d), ratio]);
        }
        let excess = |i: usize| r.ratios[i] - p.bound - p.se * r.ratio_std_errors[i];
        let worst = (0..r.ratios.len()).max_by(|&a, &b| excess(a).total_cmp(&excess(b)));
        let contraction = match worst {
            Some(i) => Check {
                suffix: None,
                value: r.ratios[i],
                std_error: Some(r.ratio_std_errors[i]),
                tolerance: Some(p.bound + p.se * r.ratio_std_errors[i]),
                pass: !r.diverged && excess(i) <= 0.0,
            },
            None => Check::info(0.0, None),
        };
        let uniqueness = Check {
            suffix: Some("uniqueness".into()),
            value: r.start_gap,
            std_error: None,
            tolerance: Some(r.start_tolerance),
            pass: r.unique(),
        };
        let value = contraction.value;
        Ok(Outcome {
            checks: vec![contraction, uniqueness],
            details: vec![detail],
            value,
            ..Outcome::default()
        })
    }

    fn bsde(&self, p: &BsdeParams) -> Res<Outcome> {
        let set = self.set(&p.set);
        let space = self.space(&p.space);
        let cfg = PideConfig::new(space, p.max_dt);
        let (terminal, b, h) = (p.terminal, p.b, p.h);
        let spec = BsdeSpec::new(
            move |x| terminal.eval(x),
            move |_, y| b.eval(y),
            move |_, y| h.eval(y),
            p.horizon,
        );
        let y = solve_bsde(&spec, set, &cfg)?;
        let value = value_at_start(&y, 0.0);
        let check = match p.check {
            BsdeCheck::Reference => {
                self.compare(value, None, p.reference.as_ref(), &p.tolerance, y.dt())
            }
            BsdeCheck::PideIdentity => {
                let u = solve_pide(
                    &|x| terminal.eval(x),
                    p.horizon,
                    space,
                    cfg.steps_for(p.horizon),
                    set,
                    Convention::Terminal,
                )?;
                let diff = (0..u.levels())
                    .flat_map(|k| {
                        u.level(k)
                            .iter()
                            .zip(y.level(k))
                            .map(|(a, b)| (a - b).abs())
                    })
                    .fold(0.0f64, f64::max);
                let tolerance = p.tolerance.tolerance(0.0, 0.0, y.dt());
                Check {
                    suffix: Some("pide-identity".into()),
                    value: diff,
                    std_error: None,
                    tolerance: Some(tolerance),
                    pass: diff <= tolerance,
                }
            }
        };
        let mut buf = Vec::new();
        y.write_csv_every(&mut buf, 1)
            .expect("writing to memory cannot fail");
        Ok(Outcome {
            checks: vec![check],
            details: vec![Detail {
                name: p.id.clone(),
                contents: String::from_utf8(buf).expect("CSV is ASCII"),
            }],
            value,
            field: Some(y),
        })
    }

    fn fbsde(&self, p: &FbsdeParams) -> Res<Outcome> {
        let set = self.set(&p.set);
        let cfg = PideConfig::new(self.space(&p.space), p.max_dt);
        let (terminal, f, g) = (p.terminal, p.f, p.g);
        let spec = FbsdeSpec {
            forward: forward(p.forward),
            x0: p.x0,
            terminal: Arc::new(move |x| terminal.eval(x)),
            f: Arc::new(move |_, y| f.eval(y)),
            g: Arc::new(move |_, y| g.eval(y)),
            horizon: p.horizon,
        };
        let settings = FbsdeSettings {
            points: p.points,
            lookahead: p.lookahead,
            samples: p.samples,
            seed: p.seed,
            grid_constant: p.grid_constant,
        };
        let r = solve_fbsde(&spec, set, &cfg, settings)?;
        let mut detail = Detail::new(
            &p.id,
            "s,x,field,recomputed,std_error,residual,tolerance,pass",
        );
        for pt in &r.points {
            detail.row(&[
                fmt12(pt.s),
                fmt12(pt.x),
                fmt12(pt.field),
                fmt12(pt.recomputed),
                fmt12(pt.std_error),
                fmt12(pt.residual),
                fmt12(pt.tolerance),
                bool_str(pt.passed()),
            ]);
        }
        let worst = r
            .points
            .iter()
            .max_by(|a, b| (a.residual / a.tolerance).total_cmp(&(b.residual / b.tolerance)));
        let mut checks = vec![match worst {
            Some(w) => Check {
                suffix: Some("recomputation".into()),
                value: w.residual,
                std_error: Some(w.std_error),
                tolerance: Some(w.tolerance),
                pass: r.passed(),
            },
            None => Check::info(0.0, None).named("recomputation"),
        }];
        checks.push(Check {
            suffix: Some("consistency".into()),
            value: r.consistency,
            std_error: None,
            tolerance: Some(0.0),
            pass: r.consistency == 0.0,
        });
        if p.reference.is_some() {
            checks.push(
                self.compare(r.y0, None, p.reference.as_ref(), &p.tolerance, r.field.dt())
                    .named("y0"),
            );
        }
        Ok(Outcome {
            checks,
            details: vec![detail],
            value: r.y0,
            field: Some(r.field),
        })
    }
}
