//! Membership of a level `c` in the admissible set, brackets for its endpoints, and direct estimates
//! of the endpoint formulas
//!
//! ```text
//! c_l = inf_u sup_x H(x, u, Du),    c_r = sup_u inf_x H(x, u, Du).
//! ```
//!
//! A level `c` is admissible iff the backward semigroup at level `c` has an orbit bounded from
//! below and one bounded from above. [`classify`] evolves a few probes and reports boundedness or
//! the direction of divergence; [`estimate_interval`] bisects on the outcome; [`minmax_cl`] and
//! [`maxmin_cr`] optimize the formulas over grid functions.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridFunction, Point, TorusGrid, MAX_DIM};
use crate::hamiltonian::HamiltonianModel;
use crate::semigroup::{
    evolve, Direction, EvolutionTrace, Propagator, SemigroupConfig, SemigroupError, StopReason, StopRule,
    TraceSummary, DEFAULT_T_FINAL,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ErgodicError {
    #[error("at least one probe is required")]
    NoProbes,
    #[error("invalid search interval: {0}")]
    InvalidSearch(String),
    #[error(
        "no level classified as bounded; divergence regimes meet between {down:?} (down) and {up:?} (up)"
    )]
    NoBoundedSample { down: Option<f64>, up: Option<f64>, samples: Vec<Sample> },
    #[error("audit failed: {check} (excess {excess:e}, slack {slack:e})")]
    AuditFailed { check: String, excess: f64, slack: f64 },
    #[error(transparent)]
    Semigroup(#[from] SemigroupError),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    DivergesUp,
    DivergesDown,
    Bounded,
    Periodic,
    Inconclusive,
}

impl Outcome {
    pub fn is_bounded(self) -> bool {
        matches!(self, Outcome::Bounded | Outcome::Periodic)
    }

    fn from_stop(stop: StopReason) -> Self {
        match stop {
            StopReason::Converged => Outcome::Bounded,
            StopReason::Periodic { .. } => Outcome::Periodic,
            StopReason::DivergedUp => Outcome::DivergesUp,
            StopReason::DivergedDown => Outcome::DivergesDown,
            StopReason::MaxTime => Outcome::Inconclusive,
        }
    }
}

/// Initial datum for a classification run.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub label: String,
    pub data: GridFunction,
}

/// Probe description used in configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSpec {
    Constant(f64),
    /// `sin(2 pi x_1)`.
    Sine,
}

impl ProbeSpec {
    pub fn build(&self, grid: TorusGrid) -> Probe {
        match self {
            ProbeSpec::Constant(k) => Probe { label: format!("const:{k}"), data: GridFunction::constant(grid, *k) },
            ProbeSpec::Sine => Probe {
                label: "sin".into(),
                data: GridFunction::from_values_unchecked(grid, grid.nodes().map(|x| (TAU * x[0]).sin()).collect()),
            },
        }
    }
}

/// Constants `-2, 0, 2` and `sin(2 pi x_1)`.
pub fn default_probe_specs() -> Vec<ProbeSpec> {
    vec![ProbeSpec::Constant(-2.0), ProbeSpec::Constant(0.0), ProbeSpec::Constant(2.0), ProbeSpec::Sine]
}

pub fn default_probes(grid: TorusGrid) -> Vec<Probe> {
    default_probe_specs().iter().map(|p| p.build(grid)).collect()
}

/// Run parameters shared by classifications.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErgodicConfig {
    /// Operator settings; the level `c` is replaced per call.
    pub semigroup: SemigroupConfig,
    pub t_final: f64,
    pub drift_threshold: f64,
}

impl ErgodicConfig {
    pub fn defaults(model: &HamiltonianModel) -> Self {
        Self { semigroup: SemigroupConfig::defaults(model, 0.0), t_final: DEFAULT_T_FINAL, drift_threshold: 1e-3 }
    }

    /// Stop rule for a probe: the default rule with this config's drift threshold.
    pub fn stop_rule(&self, model: &HamiltonianModel, w0: &GridFunction) -> StopRule {
        StopRule { drift_threshold: self.drift_threshold, ..StopRule::defaults(model, w0) }
    }

    /// `t_final` rounded to a whole number of steps.
    fn horizon(&self) -> f64 {
        let dt = self.semigroup.dt;
        (self.t_final / dt).round() * dt
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeEvidence {
    pub label: String,
    pub outcome: Outcome,
    pub summary: TraceSummary,
}

/// Record of the interpolation search `u_rho = rho phi + (1 - rho) psi` between an upward and a
/// downward diverging probe.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InterpolationRecord {
    pub up_probe: String,
    pub down_probe: String,
    pub rho: f64,
    pub steps: usize,
    pub outcome: Outcome,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Classification {
    pub c: f64,
    pub outcome: Outcome,
    pub evidence: Vec<ProbeEvidence>,
    pub interpolation: Option<InterpolationRecord>,
    /// Asymptotic drift of the diverging probes (first one in probe order).
    pub drift_rate: Option<f64>,
    /// `sup_x |H(x, w*, D^0 w*) - c|` on the limit.
    pub residual: Option<f64>,
    /// Convergence tolerance used for the probe that produced the limit.
    pub tol_conv: Option<f64>,
    /// Within `2 tol_c` of a bracket boundary (set by [`estimate_interval`]).
    pub marginal: bool,
    #[serde(skip)]
    pub limit: Option<GridFunction>,
}

fn run_probe(
    model: &HamiltonianModel,
    prop: &Propagator,
    data: &GridFunction,
    cfg: &ErgodicConfig,
) -> Result<(EvolutionTrace, f64), SemigroupError> {
    let rule = cfg.stop_rule(model, data);
    let trace = evolve(prop, data, cfg.horizon(), &rule, Direction::Backward)?;
    Ok((trace, rule.tol_conv))
}

/// Decides whether the backward semigroup at level `c` has bounded orbits.
///
/// Any bounded (converged or periodic) probe certifies membership; its limit with the smallest
/// residual is returned. When some probe diverges up and another down, the convex combinations of
/// the two are bisected in `rho` (at most 30 steps) looking for a bounded orbit.
pub fn classify(
    model: &HamiltonianModel,
    grid: &TorusGrid,
    c: f64,
    probes: &[Probe],
    cfg: &ErgodicConfig,
) -> Result<Classification, ErgodicError> {
    if probes.is_empty() {
        return Err(ErgodicError::NoProbes);
    }
    let prop = Propagator::new(model, grid, cfg.semigroup.with_c(c))?;
    let runs: Vec<(EvolutionTrace, f64)> = probes
        .par_iter()
        .map(|p| run_probe(model, &prop, &p.data, cfg))
        .collect::<Result<_, _>>()?;
    let evidence: Vec<ProbeEvidence> = probes
        .iter()
        .zip(&runs)
        .map(|(p, (t, _))| ProbeEvidence {
            label: p.label.clone(),
            outcome: Outcome::from_stop(t.stop),
            summary: t.summary(),
        })
        .collect();

    let mut out = Classification {
        c,
        outcome: Outcome::Inconclusive,
        evidence,
        interpolation: None,
        drift_rate: None,
        residual: None,
        tol_conv: None,
        marginal: false,
        limit: None,
    };

    let bounded = runs
        .iter()
        .filter(|(t, _)| t.is_bounded())
        .map(|(t, tol)| (prop.residual(&t.final_state), t, *tol))
        .min_by(|a, b| a.0.total_cmp(&b.0));
    if let Some((res, trace, tol)) = bounded {
        out.outcome = Outcome::from_stop(trace.stop);
        out.residual = Some(res);
        out.tol_conv = Some(tol);
        out.limit = Some(trace.final_state.clone());
        return Ok(out);
    }

    let outcomes: Vec<Outcome> = out.evidence.iter().map(|e| e.outcome).collect();
    let first = |o: Outcome| outcomes.iter().position(|x| *x == o);
    match (first(Outcome::DivergesUp), first(Outcome::DivergesDown)) {
        (Some(iu), Some(id)) => {
            let record = interpolate(model, &prop, cfg, probes, iu, id, &mut out)?;
            out.interpolation = Some(record);
        }
        (Some(iu), None) if !outcomes.contains(&Outcome::Inconclusive) => {
            out.outcome = Outcome::DivergesUp;
            out.drift_rate = runs[iu].0.drift_rate;
        }
        (None, Some(id)) if !outcomes.contains(&Outcome::Inconclusive) => {
            out.outcome = Outcome::DivergesDown;
            out.drift_rate = runs[id].0.drift_rate;
        }
        _ => {}
    }
    Ok(out)
}

fn interpolate(
    model: &HamiltonianModel,
    prop: &Propagator,
    cfg: &ErgodicConfig,
    probes: &[Probe],
    iu: usize,
    id: usize,
    out: &mut Classification,
) -> Result<InterpolationRecord, ErgodicError> {
    let (phi, psi) = (&probes[iu].data, &probes[id].data);
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut record = InterpolationRecord {
        up_probe: probes[iu].label.clone(),
        down_probe: probes[id].label.clone(),
        rho: 0.5,
        steps: 0,
        outcome: Outcome::Inconclusive,
    };
    for step in 1..=30 {
        let rho = 0.5 * (lo + hi);
        let data = phi.blend(psi, rho).map_err(SemigroupError::from)?;
        let (trace, tol) = run_probe(model, prop, &data, cfg)?;
        let outcome = Outcome::from_stop(trace.stop);
        record.rho = rho;
        record.steps = step;
        record.outcome = outcome;
        match outcome {
            Outcome::DivergesUp => hi = rho,
            Outcome::DivergesDown => lo = rho,
            Outcome::Bounded | Outcome::Periodic => {
                out.outcome = outcome;
                out.residual = Some(prop.residual(&trace.final_state));
                out.tol_conv = Some(tol);
                out.limit = Some(trace.final_state);
                return Ok(record);
            }
            Outcome::Inconclusive => return Ok(record),
        }
    }
    Ok(record)
}

// ---------------------------------------------------------------------------------------------
// interval estimation

/// One end of the admissible interval lies in `[lo, hi]`; `None` marks an open-ended side (the
/// search expanded without finding the other regime).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Bracket {
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    /// Width reached the requested tolerance.
    pub resolved: bool,
}

impl Bracket {
    pub fn width(&self) -> Option<f64> {
        Some(self.hi? - self.lo?)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo.is_none_or(|l| l <= x) && self.hi.is_none_or(|h| x <= h)
    }

    pub fn is_open_ended(&self) -> bool {
        self.lo.is_none() || self.hi.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Sample {
    pub c: f64,
    pub outcome: Outcome,
    pub marginal: bool,
    pub residual: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IntervalEstimate {
    /// Between a `DivergesDown` level (`lo`) and a bounded level (`hi`).
    pub c_l: Bracket,
    /// Between a bounded level (`lo`) and a `DivergesUp` level (`hi`).
    pub c_r: Bracket,
    pub tolerance: f64,
    /// Classified levels, sorted by `c`.
    pub samples: Vec<Sample>,
    #[serde(skip)]
    pub classifications: Vec<Classification>,
}

/// Expansion cap of the initial search interval.
pub const MAX_DOUBLINGS: u32 = 10;
/// Evaluation cap of each endpoint bisection.
const MAX_BISECTION_EVALS: usize = 40;

struct Classifier<'a> {
    model: &'a HamiltonianModel,
    grid: &'a TorusGrid,
    probes: &'a [Probe],
    cfg: &'a ErgodicConfig,
    cache: Mutex<BTreeMap<u64, Classification>>,
}

impl Classifier<'_> {
    fn get(&self, c: f64) -> Result<Outcome, ErgodicError> {
        let key = c.to_bits();
        if let Some(hit) = self.cache.lock().unwrap().get(&key) {
            return Ok(hit.outcome);
        }
        let cl = classify(self.model, self.grid, c, self.probes, self.cfg)?;
        let outcome = cl.outcome;
        self.cache.lock().unwrap().insert(key, cl);
        Ok(outcome)
    }

    fn samples(&self) -> Vec<(f64, Outcome)> {
        let mut v: Vec<(f64, Outcome)> =
            self.cache.lock().unwrap().values().map(|c| (c.c, c.outcome)).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    }

    fn sample_table(&self) -> Vec<Sample> {
        let mut v: Vec<Sample> = self
            .cache
            .lock()
            .unwrap()
            .values()
            .map(|c| Sample { c: c.c, outcome: c.outcome, marginal: c.marginal, residual: c.residual })
            .collect();
        v.sort_by(|a, b| a.c.total_cmp(&b.c));
        v
    }

    /// Shrinks `[a, b]`, where `a` has outcome `at_a` and `b` the opposite side, to width `tol`.
    /// Inconclusive levels are kept as interior points and never assigned to a side.
    fn refine(&self, mut a: f64, mut b: f64, at_a: Outcome, at_b: Outcome, tol: f64) -> Result<(f64, f64, bool), ErgodicError> {
        let side = |o: Outcome, reference: Outcome| match reference {
            Outcome::Bounded => o.is_bounded(),
            r => o == r,
        };
        let mut unknown: Vec<f64> = Vec::new();
        for _ in 0..MAX_BISECTION_EVALS {
            if b - a <= tol {
                break;
            }
            let mut pts: Vec<f64> = std::iter::once(a)
                .chain(unknown.iter().copied().filter(|u| *u > a && *u < b))
                .chain(std::iter::once(b))
                .collect();
            pts.sort_by(f64::total_cmp);
            let (g0, g1) = pts
                .windows(2)
                .map(|w| (w[0], w[1]))
                .max_by(|x, y| (x.1 - x.0).total_cmp(&(y.1 - y.0)))
                .unwrap();
            if g1 - g0 < 0.25 * tol {
                break;
            }
            let m = 0.5 * (g0 + g1);
            let o = self.get(m)?;
            if side(o, at_a) {
                a = m;
            } else if side(o, at_b) {
                b = m;
            } else {
                unknown.push(m);
            }
        }
        Ok((a, b, b - a <= tol * (1.0 + 1e-9)))
    }
}

/// Brackets both endpoints of the admissible interval by bisection on [`classify`].
///
/// Starting from `c_search`, the search first expands geometrically (up to 10 doublings on each
/// side) until it sees `DivergesDown` on the left and `DivergesUp` on the right; a side where this
/// never happens is reported open-ended. Each endpoint bracket is then shrunk to width `tol_c`.
pub fn estimate_interval(
    model: &HamiltonianModel,
    grid: &TorusGrid,
    c_search: (f64, f64),
    tol_c: f64,
    probes: &[Probe],
    cfg: &ErgodicConfig,
) -> Result<IntervalEstimate, ErgodicError> {
    let (lo, hi) = c_search;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(ErgodicError::InvalidSearch(format!("need lo < hi, got ({lo}, {hi})")));
    }
    if !(tol_c > 0.0) {
        return Err(ErgodicError::InvalidSearch(format!("tol_c = {tol_c} must be positive")));
    }
    if probes.is_empty() {
        return Err(ErgodicError::NoProbes);
    }
    let cls = Classifier { model, grid, probes, cfg, cache: Mutex::new(BTreeMap::new()) };
    let center = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);

    let expand = |sign: f64, target: Outcome| -> Result<Option<f64>, ErgodicError> {
        for k in 0..=MAX_DOUBLINGS {
            let c = center + sign * half * 2f64.powi(k as i32);
            if cls.get(c)? == target {
                return Ok(Some(c));
            }
        }
        Ok(None)
    };
    let (left, right) = rayon::join(|| expand(-1.0, Outcome::DivergesDown), || expand(1.0, Outcome::DivergesUp));
    let (left, right) = (left?, right?);

    // a bounded level strictly between the two regimes
    let between = |c: f64| left.is_none_or(|l| c > l) && right.is_none_or(|r| c < r);
    let mut bounded: Option<f64> = cls.samples().iter().find(|(c, o)| o.is_bounded() && between(*c)).map(|s| s.0);
    if bounded.is_none() {
        if let (Some(l), Some(r)) = (left, right) {
            let (mut d, mut u) = (l, r);
            let mut evals = 0;
            while u - d > tol_c && evals < MAX_BISECTION_EVALS {
                let m = 0.5 * (d + u);
                evals += 1;
                match cls.get(m)? {
                    Outcome::DivergesDown => d = m,
                    Outcome::DivergesUp => u = m,
                    Outcome::Bounded | Outcome::Periodic => {
                        bounded = Some(m);
                        break;
                    }
                    Outcome::Inconclusive => {
                        // probe both halves before giving up on this split
                        let q = [0.5 * (d + m), 0.5 * (m + u)];
                        let oq: Vec<Outcome> = q.iter().map(|c| cls.get(*c)).collect::<Result<_, _>>()?;
                        if let Some(i) = oq.iter().position(|o| o.is_bounded()) {
                            bounded = Some(q[i]);
                            break;
                        }
                        if oq[0] == Outcome::DivergesDown {
                            d = q[0];
                        }
                        if oq[1] == Outcome::DivergesUp {
                            u = q[1];
                        }
                        if oq[0] != Outcome::DivergesDown && oq[1] != Outcome::DivergesUp {
                            break;
                        }
                    }
                }
            }
            if bounded.is_none() {
                let samples = cls.sample_table();
                return Err(ErgodicError::NoBoundedSample { down: Some(d), up: Some(u), samples });
            }
        } else {
            return Err(ErgodicError::NoBoundedSample { down: left, up: right, samples: cls.sample_table() });
        }
    }
    let b0 = bounded.unwrap();

    let samples = cls.samples();
    let lowest_bounded = |above: f64| {
        samples.iter().filter(|(c, o)| o.is_bounded() && *c > above).map(|s| s.0).fold(b0, f64::min)
    };
    let highest_bounded = |below: f64| {
        samples.iter().filter(|(c, o)| o.is_bounded() && *c < below).map(|s| s.0).fold(b0, f64::max)
    };
    let left_job = || -> Result<Bracket, ErgodicError> {
        match left {
            None => Ok(Bracket { lo: None, hi: Some(lowest_bounded(f64::NEG_INFINITY)), resolved: false }),
            Some(l) => {
                let d = samples
                    .iter()
                    .filter(|(c, o)| *o == Outcome::DivergesDown && *c < b0)
                    .map(|s| s.0)
                    .fold(l, f64::max);
                let b = lowest_bounded(d);
                let (a, b, ok) = cls.refine(d, b, Outcome::DivergesDown, Outcome::Bounded, tol_c)?;
                Ok(Bracket { lo: Some(a), hi: Some(b), resolved: ok })
            }
        }
    };
    let right_job = || -> Result<Bracket, ErgodicError> {
        match right {
            None => Ok(Bracket { lo: Some(highest_bounded(f64::INFINITY)), hi: None, resolved: false }),
            Some(r) => {
                let u = samples
                    .iter()
                    .filter(|(c, o)| *o == Outcome::DivergesUp && *c > b0)
                    .map(|s| s.0)
                    .fold(r, f64::min);
                let b = highest_bounded(u);
                let (b, u, ok) = cls.refine(b, u, Outcome::Bounded, Outcome::DivergesUp, tol_c)?;
                Ok(Bracket { lo: Some(b), hi: Some(u), resolved: ok })
            }
        }
    };
    let (c_l, c_r) = rayon::join(left_job, right_job);
    let (c_l, c_r) = (c_l?, c_r?);

    let mut classifications: Vec<Classification> = cls.cache.into_inner().unwrap().into_values().collect();
    let near = |c: f64, b: &Bracket| {
        [b.lo, b.hi].iter().flatten().any(|e| (c - e).abs() <= 2.0 * tol_c)
    };
    for cl in &mut classifications {
        cl.marginal = near(cl.c, &c_l) || near(cl.c, &c_r);
    }
    classifications.sort_by(|a, b| a.c.total_cmp(&b.c));
    let samples = classifications
        .iter()
        .map(|c| Sample { c: c.c, outcome: c.outcome, marginal: c.marginal, residual: c.residual })
        .collect();
    Ok(IntervalEstimate { c_l, c_r, tolerance: tol_c, samples, classifications })
}

// ---------------------------------------------------------------------------------------------
// min-max / max-min estimates

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Values are clamped to `[-u_box, u_box]`.
    pub u_box: f64,
    /// Smoothing parameters of the soft max / soft min, applied in order.
    pub betas: Vec<f64>,
    /// Iteration budget per smoothing stage.
    pub max_iters: usize,
    /// Seed of the random multistart.
    pub seed: u64,
    /// Number of random smooth starts added to the constant ones.
    pub random_starts: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { u_box: 10.0, betas: vec![10.0, 100.0, 1000.0], max_iters: 400, seed: 0, random_starts: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OptimizerEstimate {
    /// Hard max (resp. min) over nodes at the best grid function found.
    pub estimate: f64,
    pub u_box: f64,
    /// Some stage stopped on the iteration budget rather than on stationarity.
    pub budget_exhausted: bool,
    /// The optimizer sits on the `u_box` clamp at some node.
    pub clamp_active: bool,
    pub starts: usize,
    #[serde(skip)]
    pub argopt: Option<GridFunction>,
}

#[derive(Clone, Copy, PartialEq)]
enum Sense {
    /// inf over u of sup over x
    MinMax,
    /// sup over u of inf over x
    MaxMin,
}

/// Per-node Hamiltonian values and their gradients w.r.t. the node values (sparse: self + neighbours).
struct NodeEval {
    values: Vec<f64>,
    /// `(node, coefficient)` lists.
    grads: Vec<Vec<(usize, f64)>>,
}

fn node_eval(model: &HamiltonianModel, grid: &TorusGrid, u: &[f64], sense: Sense) -> NodeEval {
    let dim = grid.dim();
    let inv_h = grid.n_per_dim() as f64;
    let results: Vec<(f64, Vec<(usize, f64)>)> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let x = grid.node(i);
            let mut p: Point = [0.0; MAX_DIM];
            // dp_d / du_j as (node, coefficient) pairs
            let mut dp: [[(usize, f64); 2]; MAX_DIM] = [[(i, 0.0); 2]; MAX_DIM];
            for d in 0..dim {
                let mut e = [0isize; MAX_DIM];
                e[d] = 1;
                let ip = grid.shifted(i, e);
                e[d] = -1;
                let im = grid.shifted(i, e);
                match sense {
                    Sense::MinMax => {
                        p[d] = 0.5 * (u[ip] - u[im]) * inv_h;
                        dp[d] = [(ip, 0.5 * inv_h), (im, -0.5 * inv_h)];
                    }
                    Sense::MaxMin => {
                        let fwd = (u[ip] - u[i]) * inv_h;
                        let bwd = (u[i] - u[im]) * inv_h;
                        if fwd <= 0.0 && 0.0 <= bwd {
                            // local maximum along this axis: zero is a supergradient
                            p[d] = 0.0;
                        } else if fwd.abs() <= bwd.abs() {
                            p[d] = fwd;
                            dp[d] = [(ip, inv_h), (i, -inv_h)];
                        } else {
                            p[d] = bwd;
                            dp[d] = [(i, inv_h), (im, -inv_h)];
                        }
                    }
                }
            }
            let g = model.grad(x, u[i], p);
            let mut grad = vec![(i, g.du)];
            for d in 0..dim {
                for (j, coef) in dp[d] {
                    if coef != 0.0 {
                        grad.push((j, g.dp[d] * coef));
                    }
                }
            }
            (model.h(x, u[i], p), grad)
        })
        .collect();
    let (values, grads) = results.into_iter().unzip();
    NodeEval { values, grads }
}

/// Smoothed objective (to be minimized) and its gradient.
fn smoothed(model: &HamiltonianModel, grid: &TorusGrid, u: &[f64], sense: Sense, beta: f64) -> (f64, Vec<f64>) {
    let ev = node_eval(model, grid, u, sense);
    // minimize softmax(H) for MinMax, minimize -softmin(H) = softmax(-H) for MaxMin
    let s = if sense == Sense::MinMax { 1.0 } else { -1.0 };
    let top = ev.values.iter().map(|v| s * v).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = ev.values.iter().map(|v| (beta * (s * v - top)).exp()).collect();
    let z: f64 = weights.iter().sum();
    let value = top + z.ln() / beta;
    let mut grad = vec![0.0; u.len()];
    for (i, w) in weights.iter().enumerate() {
        let wi = s * w / z;
        for &(j, coef) in &ev.grads[i] {
            grad[j] += wi * coef;
        }
    }
    (value, grad)
}

fn hard_value(model: &HamiltonianModel, grid: &TorusGrid, u: &[f64], sense: Sense) -> f64 {
    let ev = node_eval(model, grid, u, sense);
    match sense {
        Sense::MinMax => ev.values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Sense::MaxMin => ev.values.iter().copied().fold(f64::INFINITY, f64::min),
    }
}

/// Projected gradient descent with Armijo backtracking; returns whether the budget ran out.
fn descend(model: &HamiltonianModel, grid: &TorusGrid, u: &mut [f64], sense: Sense, beta: f64, cfg: &OptimizerConfig) -> bool {
    let clamp = |v: f64| v.clamp(-cfg.u_box, cfg.u_box);
    let mut step = 1.0;
    let (mut f, mut g) = smoothed(model, grid, u, sense, beta);
    for _ in 0..cfg.max_iters {
        step *= 2.0;
        loop {
            let trial: Vec<f64> = u.iter().zip(&g).map(|(x, d)| clamp(x - step * d)).collect();
            let decrease: f64 = u.iter().zip(&trial).zip(&g).map(|((x, y), d)| d * (x - y)).sum();
            if decrease <= 1e-14 * (1.0 + f.abs()) {
                return false;
            }
            let (ft, gt) = smoothed(model, grid, &trial, sense, beta);
            if ft <= f - 1e-4 * decrease {
                u.copy_from_slice(&trial);
                f = ft;
                g = gt;
                break;
            }
            step *= 0.5;
            if step < 1e-16 {
                return false;
            }
        }
    }
    true
}

fn starts(grid: &TorusGrid, cfg: &OptimizerConfig) -> Vec<Vec<f64>> {
    let mut out = vec![
        vec![0.0; grid.len()],
        vec![0.5 * cfg.u_box; grid.len()],
        vec![-0.5 * cfg.u_box; grid.len()],
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.random_starts {
        let dim = grid.dim();
        let coef: Vec<[f64; 4]> = (0..3 * dim)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0) * 0.25 * cfg.u_box))
            .collect();
        let vals = grid
            .nodes()
            .map(|x| {
                let mut v = 0.0;
                for d in 0..dim {
                    for k in 0..3 {
                        let a = coef[d * 3 + k];
                        let w = TAU * (k + 1) as f64;
                        v += a[0] * (w * x[d]).cos() + a[1] * (w * x[d]).sin();
                    }
                }
                v.clamp(-cfg.u_box, cfg.u_box)
            })
            .collect();
        out.push(vals);
    }
    out
}

fn optimize(model: &HamiltonianModel, grid: &TorusGrid, cfg: &OptimizerConfig, sense: Sense) -> OptimizerEstimate {
    let runs: Vec<(f64, Vec<f64>, bool)> = starts(grid, cfg)
        .into_iter()
        .map(|mut u| {
            let mut exhausted = false;
            for &beta in &cfg.betas {
                exhausted |= descend(model, grid, &mut u, sense, beta, cfg);
            }
            (hard_value(model, grid, &u, sense), u, exhausted)
        })
        .collect();
    let n_starts = runs.len();
    let better = |a: f64, b: f64| match sense {
        Sense::MinMax => a < b,
        Sense::MaxMin => a > b,
    };
    let mut best = 0;
    for i in 1..runs.len() {
        if better(runs[i].0, runs[best].0) {
            best = i;
        }
    }
    let (estimate, u, exhausted) = runs.into_iter().nth(best).unwrap();
    let clamp_active = u.iter().any(|v| v.abs() >= cfg.u_box * (1.0 - 1e-12));
    OptimizerEstimate {
        estimate,
        u_box: cfg.u_box,
        budget_exhausted: exhausted,
        clamp_active,
        starts: n_starts,
        argopt: Some(GridFunction::from_values_unchecked(*grid, u)),
    }
}

/// Estimate of `c_l = inf_u sup_x H(x, u, Du)` over grid functions with values in `[-U_box, U_box]`,
/// using centered differences for `Du`.
pub fn minmax_cl(model: &HamiltonianModel, grid: &TorusGrid, cfg: &OptimizerConfig) -> OptimizerEstimate {
    optimize(model, grid, cfg, Sense::MinMax)
}

/// Estimate of `c_r = sup_u inf_x H(x, u, Du)`.
///
/// At each node and axis the one-sided difference of smaller magnitude is used, and zero when the
/// node is a local maximum along the axis (`D^+ <= 0 <= D^-`), where zero belongs to the
/// superdifferential.
pub fn maxmin_cr(model: &HamiltonianModel, grid: &TorusGrid, cfg: &OptimizerConfig) -> OptimizerEstimate {
    optimize(model, grid, cfg, Sense::MaxMin)
}

// ---------------------------------------------------------------------------------------------
// audit

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditReport {
    pub slack: f64,
    /// `max(phi - T^- phi)`: `T^- phi >= phi - slack` holds iff this is `<= slack`.
    pub backward_lower: f64,
    /// `max(T^- phi - phi)`.
    pub backward_upper: f64,
    /// `max(psi - T^+ psi)` for the forward limit `psi`.
    pub forward_lower: f64,
    /// `max(T^+ psi - psi)`.
    pub forward_upper: f64,
    pub forward_stop: StopReason,
    /// Constant added to `phi` before the forward evolution (see [`forward_limit`]).
    pub forward_shift: f64,
}

/// Forward limit of `phi + a`, with `a` chosen so that the orbit neither escapes up nor down.
///
/// When `H` increases in `u` the forward operator amplifies uniform perturbations, so a forward
/// fixed point repels and tiny errors in `phi` push the plain orbit away from it. Since `T^+` is
/// monotone, the orbits of `phi + a` are ordered in `a`; the threshold between escaping down and
/// escaping up is located by bisection, and the first bounded orbit met is returned.
pub fn forward_limit(
    prop: &Propagator,
    phi: &GridFunction,
    rule: &StopRule,
    horizon: f64,
) -> Result<(EvolutionTrace, f64), ErgodicError> {
    let run = |a: f64| evolve(prop, &phi.shifted(a), horizon, rule, Direction::Forward);
    let first = run(0.0)?;
    let o0 = Outcome::from_stop(first.stop);
    if !matches!(o0, Outcome::DivergesUp | Outcome::DivergesDown) {
        return Ok((first, 0.0));
    }
    // bracket the threshold
    let sign = if o0 == Outcome::DivergesUp { -1.0 } else { 1.0 };
    let scale = 1e-6 * (1.0 + phi.sup_norm());
    let (mut lo, mut hi) = if sign < 0.0 { (f64::NAN, 0.0) } else { (0.0, f64::NAN) };
    for k in 0..40 {
        let a = sign * scale * 2f64.powi(k);
        let tr = run(a)?;
        match Outcome::from_stop(tr.stop) {
            Outcome::DivergesUp => hi = a,
            Outcome::DivergesDown => lo = a,
            Outcome::Bounded | Outcome::Periodic => return Ok((tr, a)),
            Outcome::Inconclusive => return Ok((tr, a)),
        }
        if lo.is_finite() && hi.is_finite() {
            break;
        }
    }
    if !(lo.is_finite() && hi.is_finite()) {
        return Ok((first, 0.0));
    }
    let mut last = first;
    let mut a = 0.0;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        a = mid;
        last = run(mid)?;
        match Outcome::from_stop(last.stop) {
            Outcome::DivergesUp => hi = mid,
            Outcome::DivergesDown => lo = mid,
            _ => break,
        }
    }
    Ok((last, a))
}

/// Checks on the discrete operators that a bounded limit realizes the inequalities of the
/// semigroup characterization: `phi = limit` satisfies `phi - slack <= T^- phi <= phi + slack`,
/// and its forward limit `psi` satisfies `psi - slack <= T^+ psi <= psi + slack`, with
/// `slack = 2 tol_conv` and one step of the operators.
pub fn fixed_point_audit(
    model: &HamiltonianModel,
    grid: &TorusGrid,
    c: f64,
    limit: &GridFunction,
    tol_conv: f64,
    cfg: &ErgodicConfig,
) -> Result<AuditReport, ErgodicError> {
    let prop = Propagator::new(model, grid, cfg.semigroup.with_c(c))?;
    let slack = 2.0 * tol_conv;
    let fail = |check: &str, excess: f64| ErgodicError::AuditFailed { check: check.into(), excess, slack };

    let back = prop.step_backward(limit)?;
    let m = back.sup_metrics(limit)?;
    let (backward_lower, backward_upper) = (-m.min_diff, m.max_diff);
    if backward_lower > slack {
        return Err(fail("T^- phi >= phi - slack", backward_lower));
    }
    if backward_upper > slack {
        return Err(fail("T^- phi <= phi + slack", backward_upper));
    }

    let rule = StopRule { tol_conv, ..cfg.stop_rule(model, limit) };
    let (trace, forward_shift) = forward_limit(&prop, limit, &rule, cfg.horizon())?;
    if !trace.is_bounded() {
        return Err(fail("forward orbit of phi has a limit", trace.final_state.sup_metrics(limit)?.sup_norm_diff));
    }
    let psi = trace.final_state;
    let fwd = prop.step_forward(&psi)?;
    let m = fwd.sup_metrics(&psi)?;
    let (forward_lower, forward_upper) = (-m.min_diff, m.max_diff);
    if forward_lower > slack {
        return Err(fail("T^+ psi >= psi - slack", forward_lower));
    }
    if forward_upper > slack {
        return Err(fail("T^+ psi <= psi + slack", forward_upper));
    }
    Ok(AuditReport {
        slack,
        backward_lower,
        backward_upper,
        forward_lower,
        forward_upper,
        forward_stop: trace.stop,
        forward_shift,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::{build_model, ModelSpec};

    fn model(spec: ModelSpec) -> HamiltonianModel {
        build_model(&spec, 1).unwrap()
    }

    fn quadratic() -> HamiltonianModel {
        model(ModelSpec::new("quadratic"))
    }

    fn tanh() -> HamiltonianModel {
        model(ModelSpec::new("quadratic_plus_f").with_text("f", "tanh"))
    }

    fn setup(m: &HamiltonianModel) -> (TorusGrid, Vec<Probe>, ErgodicConfig) {
        let g = TorusGrid::new(1, 64).unwrap();
        (g, default_probes(g), ErgodicConfig::defaults(m))
    }

    #[test]
    fn quadratic_zero_level_bounded() {
        let m = quadratic();
        let (g, probes, cfg) = setup(&m);
        let cl = classify(&m, &g, 0.0, &probes, &cfg).unwrap();
        assert_eq!(cl.outcome, Outcome::Bounded);
        assert!(cl.residual.unwrap() < 5e-2);
        let lim = cl.limit.as_ref().unwrap();
        assert!(lim.max() - lim.min() < 5e-2);
        fixed_point_audit(&m, &g, 0.0, lim, cl.tol_conv.unwrap(), &cfg).unwrap();
    }

    #[test]
    fn quadratic_positive_level_diverges_up() {
        let m = quadratic();
        let (g, probes, cfg) = setup(&m);
        let cl = classify(&m, &g, 0.3, &probes, &cfg).unwrap();
        assert_eq!(cl.outcome, Outcome::DivergesUp);
        assert!((cl.drift_rate.unwrap() - 0.3).abs() < 0.03);
        assert!(cl.limit.is_none() && cl.residual.is_none());
    }

    #[test]
    fn tanh_levels() {
        let m = tanh();
        let (g, probes, cfg) = setup(&m);
        assert_eq!(classify(&m, &g, 1.5, &probes, &cfg).unwrap().outcome, Outcome::DivergesUp);
        assert_eq!(classify(&m, &g, -1.5, &probes, &cfg).unwrap().outcome, Outcome::DivergesDown);
        let cl = classify(&m, &g, 0.0, &probes, &cfg).unwrap();
        assert_eq!(cl.outcome, Outcome::Bounded);
        assert!(cl.limit.as_ref().unwrap().sup_norm() < 1e-3);
        fixed_point_audit(&m, &g, 0.0, cl.limit.as_ref().unwrap(), cl.tol_conv.unwrap(), &cfg).unwrap();
    }

    #[test]
    fn audit_rejects_non_limit() {
        let m = quadratic();
        let (g, _, cfg) = setup(&m);
        let sine = ProbeSpec::Sine.build(g).data;
        assert!(matches!(fixed_point_audit(&m, &g, 0.0, &sine, 1e-6, &cfg), Err(ErgodicError::AuditFailed { .. })));
    }

    #[test]
    fn classify_needs_probes() {
        let m = quadratic();
        let (g, _, cfg) = setup(&m);
        assert_eq!(classify(&m, &g, 0.0, &[], &cfg).unwrap_err(), ErgodicError::NoProbes);
    }

    #[test]
    fn quadratic_interval_collapses_to_zero() {
        let m = quadratic();
        let (g, probes, cfg) = setup(&m);
        let est = estimate_interval(&m, &g, (-1.0, 1.0), 0.05, &probes, &cfg).unwrap();
        for b in [est.c_l, est.c_r] {
            assert!(b.resolved && b.contains(0.0) && b.width().unwrap() <= 0.05, "{est:?}");
        }
        assert!(est.c_l.hi.unwrap() <= est.c_r.lo.unwrap() + 0.1);
    }

    #[test]
    fn optimizers_on_quadratic() {
        let m = quadratic();
        let g = TorusGrid::new(1, 64).unwrap();
        let cfg = OptimizerConfig::default();
        let lo = minmax_cl(&m, &g, &cfg);
        assert!((0.0..=0.05).contains(&lo.estimate), "{lo:?}");
        let hi = maxmin_cr(&m, &g, &cfg);
        assert!((-0.05..=0.0).contains(&hi.estimate), "{hi:?}");
    }

    #[test]
    fn optimizers_on_tanh_reach_the_box() {
        let m = tanh();
        let g = TorusGrid::new(1, 64).unwrap();
        let cfg = OptimizerConfig::default();
        let lo = minmax_cl(&m, &g, &cfg);
        assert!((-1.0..=-0.95).contains(&lo.estimate), "{lo:?}");
        assert!(lo.clamp_active);
        let hi = maxmin_cr(&m, &g, &cfg);
        assert!((0.95..=1.0).contains(&hi.estimate), "{hi:?}");
    }

    #[test]
    fn smoothed_gradient_matches_finite_differences() {
        let m = model(ModelSpec::new("linear_in_u").with_number("factor_mean", 1.5).with_list("factor_sin", &[0.5]));
        let g = TorusGrid::new(1, 16).unwrap();
        let u: Vec<f64> = g.nodes().map(|x| (TAU * x[0]).cos() + 0.3 * (2.0 * TAU * x[0]).sin()).collect();
        for sense in [Sense::MinMax, Sense::MaxMin] {
            let (_, grad) = smoothed(&m, &g, &u, sense, 10.0);
            for j in [0, 3, 7] {
                let e = 1e-6;
                let mut up = u.clone();
                let mut dn = u.clone();
                up[j] += e;
                dn[j] -= e;
                let fd = (smoothed(&m, &g, &up, sense, 10.0).0 - smoothed(&m, &g, &dn, sense, 10.0).0) / (2.0 * e);
                assert!((fd - grad[j]).abs() < 1e-5 * (1.0 + fd.abs()), "node {j}: {fd} vs {}", grad[j]);
            }
        }
    }
}
