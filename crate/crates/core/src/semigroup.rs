//! Discrete backward and forward solution semigroups `T^{-,c}_t`, `T^{+,c}_t` on grid functions.
//!
//! The backward operator solves `w_t + H(x, w, Dw) = c` through the one-step representation
//!
//! ```text
//! T^-_dt w(x) = min_{|x - y| <= v_max dt} w(y) + dt (L(y, w(y), (x - y)/dt) + c)
//! T^+_dt w(x) = max_{|y - x| <= v_max dt} w(y) - dt (L(x, w(y), (y - x)/dt) + c)
//! ```
//!
//! Three minimizations over `y` are available:
//! - segments (1-D, closed-form `L`, explicit coupling): the integrand is interpolated linearly on
//!   each grid cell and the kinetic term `|v|^2/(4k)` is minimized exactly on every cell;
//! - lattice: `y` runs over a sub-grid of spacing `h / subcells`;
//! - Lax-Friedrichs: a monotone finite-difference step of the PDE itself.
//!
//! All three are monotone. [`evolve`] iterates the operator and classifies the long-run behaviour.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{norm, GridError, GridFunction, Point, TorusGrid, MAX_DIM};
use crate::hamiltonian::{HamiltonianError, HamiltonianModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SemigroupError {
    #[error("invalid semigroup configuration: {0}")]
    InvalidConfig(String),
    #[error("implicit u-coupling did not converge within 100 sweeps at node {node}")]
    FixedPointStalled { node: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Hamiltonian(#[from] HamiltonianError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    SemiLagrangian,
    LaxFriedrichs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// `u` in `L` is taken from the previous step.
    Explicit,
    /// `u` in `L` solves the scalar fixed point of the one-step relation.
    Implicit,
}

/// Candidate set of the semi-Lagrangian minimization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Candidates {
    /// Segments whenever they apply, otherwise the lattice.
    Auto,
    Segments,
    Lattice,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `T^{-,c}`.
    Backward,
    /// `T^{+,c}`.
    Forward,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemigroupConfig {
    pub dt: f64,
    pub v_max: f64,
    pub c: f64,
    pub scheme: Scheme,
    pub u_coupling: Coupling,
    pub candidates: Candidates,
    /// Lattice refinement factor (lattice spacing `h / subcells`).
    pub subcells: usize,
    /// Lax-Friedrichs viscosity; defaults to the sampled `sup |H_p|` over `|p| <= 2`.
    pub viscosity: Option<f64>,
}

/// `min(5e-3, 0.25 / (lambda + 1))`.
pub fn default_dt(model: &HamiltonianModel) -> f64 {
    (0.25 / (model.lambda_bound() + 1.0)).min(5e-3)
}

/// Default resolution: 128 nodes in 1-D, 64 per axis in 2-D.
pub fn default_n_per_dim(dim: usize) -> usize {
    if dim == 1 {
        128
    } else {
        64
    }
}

impl SemigroupConfig {
    pub fn defaults(model: &HamiltonianModel, c: f64) -> Self {
        Self {
            dt: default_dt(model),
            v_max: model.default_v_max(),
            c,
            scheme: Scheme::SemiLagrangian,
            u_coupling: Coupling::Explicit,
            candidates: Candidates::Auto,
            subcells: if model.dim() == 1 { 4 } else { 1 },
            viscosity: None,
        }
    }

    pub fn with_c(self, c: f64) -> Self {
        Self { c, ..self }
    }

    pub fn validate(&self, model: &HamiltonianModel, grid: &TorusGrid) -> Result<(), SemigroupError> {
        grid.require_solver_resolution()?;
        let bad = |m: String| Err(SemigroupError::InvalidConfig(m));
        if model.dim() != grid.dim() {
            return bad(format!("model dimension {} vs grid dimension {}", model.dim(), grid.dim()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt = {} must be positive", self.dt));
        }
        if self.dt * model.lambda_bound() >= 0.5 {
            return bad(format!("dt * lambda = {} must be below 1/2", self.dt * model.lambda_bound()));
        }
        if !(self.v_max > 0.0 && self.v_max.is_finite()) {
            return bad(format!("v_max = {} must be positive", self.v_max));
        }
        if !self.c.is_finite() {
            return bad("c must be finite".into());
        }
        if self.subcells == 0 {
            return bad("subcells must be at least 1".into());
        }
        if self.candidates == Candidates::Segments && !self.segments_apply(model) {
            return bad("segment minimization needs 1-D, a closed-form Lagrangian and explicit coupling".into());
        }
        if self.scheme == Scheme::LaxFriedrichs {
            let alpha = self.viscosity_for(model);
            let need = model.sampled_sup_dp(2.0);
            if alpha < need {
                return bad(format!("viscosity {alpha} below sampled sup |H_p| = {need}"));
            }
            let cfl = self.dt * alpha * grid.dim() as f64 / grid.spacing();
            if cfl > 1.0 {
                return bad(format!("Lax-Friedrichs CFL number dt * alpha * dim / h = {cfl} exceeds 1"));
            }
        }
        Ok(())
    }

    fn segments_apply(&self, model: &HamiltonianModel) -> bool {
        model.dim() == 1 && model.has_closed_form_lagrangian() && self.u_coupling == Coupling::Explicit
    }

    pub fn viscosity_for(&self, model: &HamiltonianModel) -> f64 {
        self.viscosity.unwrap_or_else(|| model.sampled_sup_dp(2.0))
    }
}

/// Sub-grid candidate offsets with precomputed velocities and kinetic costs.
#[derive(Clone, Debug)]
struct Lattice {
    fine: TorusGrid,
    m: usize,
    offsets: Vec<[isize; MAX_DIM]>,
    velocities: Vec<Point>,
    costs: Vec<f64>,
    potential: Vec<f64>,
    coupling: Vec<f64>,
}

#[derive(Clone, Debug)]
enum Minimizer {
    Segments { reach: isize, radius: f64 },
    Lattice(Lattice),
    LaxFriedrichs { alpha: f64 },
}

/// One-step operators for a fixed model, grid and configuration.
#[derive(Clone, Debug)]
pub struct Propagator {
    model: HamiltonianModel,
    grid: TorusGrid,
    cfg: SemigroupConfig,
    potential: Vec<f64>,
    coupling: Vec<f64>,
    minimizer: Minimizer,
}

impl Propagator {
    pub fn new(model: &HamiltonianModel, grid: &TorusGrid, cfg: SemigroupConfig) -> Result<Self, SemigroupError> {
        cfg.validate(model, grid)?;
        let h = grid.spacing();
        // never look past half the torus, so each source point is seen once
        let radius = (cfg.v_max * cfg.dt).min(0.5 - 0.5 * h);
        let minimizer = match cfg.scheme {
            Scheme::LaxFriedrichs => Minimizer::LaxFriedrichs { alpha: cfg.viscosity_for(model) },
            Scheme::SemiLagrangian => {
                let segments = match cfg.candidates {
                    Candidates::Segments => true,
                    Candidates::Lattice => false,
                    Candidates::Auto => cfg.segments_apply(model),
                };
                if segments {
                    Minimizer::Segments { reach: (radius / h).ceil() as isize, radius }
                } else {
                    Minimizer::Lattice(Lattice::new(model, grid, cfg, radius)?)
                }
            }
        };
        Ok(Self {
            model: model.clone(),
            grid: *grid,
            cfg,
            potential: grid.nodes().map(|x| model.potential_at(x)).collect(),
            coupling: grid.nodes().map(|x| model.coupling_at(x)).collect(),
            minimizer,
        })
    }

    pub fn config(&self) -> &SemigroupConfig {
        &self.cfg
    }

    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    pub fn model(&self) -> &HamiltonianModel {
        &self.model
    }

    pub fn dt(&self) -> f64 {
        self.cfg.dt
    }

    /// The same operators at another level `c`.
    pub fn at_level(&self, c: f64) -> Self {
        let mut p = self.clone();
        p.cfg.c = c;
        p
    }

    pub fn step(&self, dir: Direction, w: &GridFunction) -> Result<GridFunction, SemigroupError> {
        if w.grid() != self.grid {
            return Err(GridError::GridMismatch(w.grid(), self.grid).into());
        }
        let values = match &self.minimizer {
            Minimizer::Segments { reach, radius } => self.segments_step(dir, w.values(), *reach, *radius),
            Minimizer::Lattice(lat) => self.lattice_step(dir, w, lat)?,
            Minimizer::LaxFriedrichs { alpha } => self.lax_friedrichs_step(dir, w, *alpha),
        };
        Ok(GridFunction::from_values_unchecked(self.grid, values))
    }

    pub fn step_backward(&self, w: &GridFunction) -> Result<GridFunction, SemigroupError> {
        self.step(Direction::Backward, w)
    }

    pub fn step_forward(&self, w: &GridFunction) -> Result<GridFunction, SemigroupError> {
        self.step(Direction::Forward, w)
    }

    /// `n` consecutive steps, i.e. the operator at time `n dt`.
    pub fn apply(&self, dir: Direction, w: &GridFunction, n: usize) -> Result<GridFunction, SemigroupError> {
        let mut out = w.clone();
        for _ in 0..n {
            out = self.step(dir, &out)?;
        }
        Ok(out)
    }

    /// `sup_x |H(x, w, D^0 w) - c|` with centered differences.
    pub fn residual(&self, w: &GridFunction) -> f64 {
        let d = w.diff_ops();
        let grid = self.grid;
        (0..grid.len())
            .map(|i| (self.model.h(grid.node(i), w.values()[i], d.centered[i]) - self.cfg.c).abs())
            .fold(0.0, f64::max)
    }

    fn segments_step(&self, dir: Direction, w: &[f64], reach: isize, radius: f64) -> Vec<f64> {
        let n = self.grid.n_per_dim() as isize;
        let h = self.grid.spacing();
        let dt = self.cfg.dt;
        let c = self.cfg.c;
        let four_k_dt = 4.0 * self.model.kinetic() * dt;
        let f = *self.model.u_term();
        let at = |i: isize| i.rem_euclid(n) as usize;
        match dir {
            Direction::Backward => {
                // integrand without the kinetic term, at the source node
                let a: Vec<f64> = (0..w.len())
                    .map(|j| w[j] - dt * (self.potential[j] + self.coupling[j] * w[j] + f.value(w[j])))
                    .collect();
                (0..n)
                    .into_par_iter()
                    .map(|i| {
                        let mut best = f64::INFINITY;
                        for j in -reach..reach {
                            let (lo, hi) = (j as f64 * h, (j + 1) as f64 * h);
                            let (s0, s1) = (lo.max(-radius), hi.min(radius));
                            if s0 > s1 {
                                continue;
                            }
                            let (a0, a1) = (a[at(i + j)], a[at(i + j + 1)]);
                            let slope = (a1 - a0) / h;
                            let s = (-0.5 * four_k_dt * slope).clamp(s0, s1);
                            let val = a0 + slope * (s - lo) + s * s / four_k_dt;
                            best = best.min(val);
                        }
                        best + dt * c
                    })
                    .collect()
            }
            Direction::Forward => (0..n)
                .into_par_iter()
                .map(|i| {
                    let iu = i as usize;
                    let gx = self.coupling[iu];
                    let b = |j: isize| {
                        let u = w[at(j)];
                        u * (1.0 + dt * gx) + dt * f.value(u)
                    };
                    let mut best = f64::NEG_INFINITY;
                    for j in -reach..reach {
                        let (lo, hi) = (j as f64 * h, (j + 1) as f64 * h);
                        let (s0, s1) = (lo.max(-radius), hi.min(radius));
                        if s0 > s1 {
                            continue;
                        }
                        let (b0, b1) = (b(i + j), b(i + j + 1));
                        let slope = (b1 - b0) / h;
                        let s = (0.5 * four_k_dt * slope).clamp(s0, s1);
                        let val = b0 + slope * (s - lo) - s * s / four_k_dt;
                        best = best.max(val);
                    }
                    best + dt * (self.potential[iu] - c)
                })
                .collect(),
        }
    }

    fn lattice_step(&self, dir: Direction, w: &GridFunction, lat: &Lattice) -> Result<Vec<f64>, SemigroupError> {
        let dt = self.cfg.dt;
        let c = self.cfg.c;
        let fine = lat.fine;
        let wf: Vec<f64> = if lat.m == 1 {
            w.values().to_vec()
        } else {
            (0..fine.len()).into_par_iter().map(|k| w.interpolate(fine.node(k))).collect()
        };
        let f = *self.model.u_term();
        let closed = self.model.has_closed_form_lagrangian();
        let implicit = self.cfg.u_coupling == Coupling::Implicit;
        let grid = self.grid;
        let lagrangian = |pos: Point, fk: Option<usize>, node: Option<usize>, u: f64, k: usize| {
            if closed {
                let (v, g) = match (fk, node) {
                    (Some(fk), _) => (lat.potential[fk], lat.coupling[fk]),
                    (None, Some(i)) => (self.potential[i], self.coupling[i]),
                    _ => unreachable!(),
                };
                Ok(lat.costs[k] - v - g * u - f.value(u))
            } else {
                self.model.lagrangian_value(pos, u, lat.velocities[k])
            }
        };
        (0..grid.len())
            .into_par_iter()
            .map(|i| {
                let mi = grid.multi_index(i);
                let fi = fine.flat_index([mi[0] * lat.m, mi[1] * lat.m]);
                let x = grid.node(i);
                let mut best = match dir {
                    Direction::Backward => f64::INFINITY,
                    Direction::Forward => f64::NEG_INFINITY,
                };
                for (k, off) in lat.offsets.iter().enumerate() {
                    let val = match dir {
                        Direction::Backward => {
                            let fk = fine.shifted(fi, [-off[0], -off[1]]);
                            let y = fine.node(fk);
                            let wy = wf[fk];
                            let rhs = |u: f64| lagrangian(y, Some(fk), None, u, k).map(|l| wy + dt * (l + c));
                            if implicit {
                                solve_scalar(rhs, wy).ok_or(SemigroupError::FixedPointStalled { node: i })??
                            } else {
                                rhs(wy)?
                            }
                        }
                        Direction::Forward => {
                            let fk = fine.shifted(fi, *off);
                            let wy = wf[fk];
                            let rhs = |u: f64| lagrangian(x, None, Some(i), u, k).map(|l| wy - dt * (l + c));
                            if implicit {
                                solve_scalar(rhs, wy).ok_or(SemigroupError::FixedPointStalled { node: i })??
                            } else {
                                rhs(wy)?
                            }
                        }
                    };
                    best = match dir {
                        Direction::Backward => best.min(val),
                        Direction::Forward => best.max(val),
                    };
                }
                Ok(best)
            })
            .collect()
    }

    fn lax_friedrichs_step(&self, dir: Direction, w: &GridFunction, alpha: f64) -> Vec<f64> {
        let d = w.diff_ops();
        let dt = self.cfg.dt;
        let c = self.cfg.c;
        let grid = self.grid;
        let dim = grid.dim();
        (0..grid.len())
            .into_par_iter()
            .map(|i| {
                let x = grid.node(i);
                let u = w.values()[i];
                let mut visc = 0.0;
                for k in 0..dim {
                    visc += 0.5 * (d.forward[i][k] - d.backward[i][k]);
                }
                let hval = self.model.h(x, u, d.centered[i]) - c;
                match dir {
                    Direction::Backward => u - dt * (hval - alpha * visc),
                    Direction::Forward => u + dt * (hval + alpha * visc),
                }
            })
            .collect()
    }
}

/// Fixed point of `u = rhs(u)` by plain iteration from `start` (a contraction when `dt lambda < 1`).
fn solve_scalar(
    rhs: impl Fn(f64) -> Result<f64, HamiltonianError>,
    start: f64,
) -> Option<Result<f64, HamiltonianError>> {
    let mut u = start;
    for _ in 0..100 {
        let next = match rhs(u) {
            Ok(v) => v,
            Err(e) => return Some(Err(e)),
        };
        if (next - u).abs() <= 1e-12 * (1.0 + next.abs()) {
            return Some(Ok(next));
        }
        u = next;
    }
    None
}

impl Lattice {
    fn new(model: &HamiltonianModel, grid: &TorusGrid, cfg: SemigroupConfig, radius: f64) -> Result<Self, SemigroupError> {
        let m = cfg.subcells;
        let fine = TorusGrid::coarse(grid.dim(), grid.n_per_dim() * m)?;
        let hf = fine.spacing();
        let reach = (radius / hf).floor() as isize;
        let second: Vec<isize> = if grid.dim() == 2 { (-reach..=reach).collect() } else { vec![0] };
        let mut offsets = Vec::new();
        let mut velocities = Vec::new();
        let mut costs = Vec::new();
        for &b in &second {
            for a in -reach..=reach {
                let o = [a as f64 * hf, b as f64 * hf];
                if norm(o) <= radius * (1.0 + 1e-12) {
                    let v = [o[0] / cfg.dt, o[1] / cfg.dt];
                    offsets.push([a, b]);
                    velocities.push(v);
                    costs.push(model.velocity_cost(v));
                }
            }
        }
        Ok(Self {
            fine,
            m,
            offsets,
            velocities,
            costs,
            potential: fine.nodes().map(|x| model.potential_at(x)).collect(),
            coupling: fine.nodes().map(|x| model.coupling_at(x)).collect(),
        })
    }
}

// ---------------------------------------------------------------------------------------------
// long-run driver

/// Termination parameters of [`evolve`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    /// Convergence: every per-step sup increment in the last window is below this.
    pub tol_conv: f64,
    /// Window length in time units for convergence and trend checks.
    pub window: f64,
    /// Magnitude beyond which a sustained trend is reported as divergence right away.
    pub u_cap: f64,
    /// Smallest asymptotic drift rate reported as divergence.
    pub drift_threshold: f64,
    /// Probe periods for periodic-orbit detection.
    pub periods: Vec<f64>,
    /// Keep every `snapshot_stride`-th step as a snapshot in the trace (0 disables).
    pub snapshot_stride: usize,
    /// Stop as soon as a terminal outcome is detected.
    pub early_stop: bool,
}

impl StopRule {
    /// `tol_conv = 1e-6 (1 + |w0|)`, `U_cap = 1e3 (1 + |w0|)`, window `max(1, 1/lambda)`.
    pub fn defaults(model: &HamiltonianModel, w0: &GridFunction) -> Self {
        let scale = 1.0 + w0.sup_norm();
        let lambda = model.lambda_bound();
        Self {
            tol_conv: 1e-6 * scale,
            window: if lambda > 0.0 { (1.0 / lambda).max(1.0) } else { 1.0 },
            u_cap: 1e3 * scale,
            drift_threshold: 1e-3,
            periods: vec![0.5, 1.0, 2.0, 4.0, 8.0, 16.0],
            snapshot_stride: 0,
            early_stop: true,
        }
    }
}

/// Default horizon of long-run evolutions.
pub const DEFAULT_T_FINAL: f64 = 400.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StopReason {
    Converged,
    DivergedUp,
    DivergedDown,
    Periodic { period: f64 },
    MaxTime,
}

/// Per-step diagnostics and the final state of a long-run evolution.
#[derive(Clone, Debug)]
pub struct EvolutionTrace {
    pub direction: Direction,
    pub c: f64,
    pub dt: f64,
    pub times: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub sup_increment: Vec<f64>,
    pub snapshot_stride: usize,
    pub snapshots: Vec<(f64, GridFunction)>,
    pub stop: StopReason,
    /// Asymptotic drift per unit time, when a divergence was detected.
    pub drift_rate: Option<f64>,
    pub final_state: GridFunction,
}

/// Compact view of a trace for reports.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceSummary {
    pub stop: StopReason,
    pub t_end: f64,
    pub steps: usize,
    pub final_min: f64,
    pub final_max: f64,
    pub last_sup_increment: f64,
    pub drift_rate: Option<f64>,
}

impl EvolutionTrace {
    pub fn summary(&self) -> TraceSummary {
        TraceSummary {
            stop: self.stop,
            t_end: self.times.last().copied().unwrap_or(0.0),
            steps: self.times.len().saturating_sub(1),
            final_min: self.final_state.min(),
            final_max: self.final_state.max(),
            last_sup_increment: self.sup_increment.last().copied().unwrap_or(0.0),
            drift_rate: self.drift_rate,
        }
    }

    pub fn is_bounded(&self) -> bool {
        matches!(self.stop, StopReason::Converged | StopReason::Periodic { .. })
    }

    /// CSV with columns `t,min,max,sup_increment`.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        use crate::fmt_f64;
        writeln!(out, "t,min,max,sup_increment")?;
        for k in 0..self.times.len() {
            writeln!(
                out,
                "{},{},{},{}",
                fmt_f64(self.times[k]),
                fmt_f64(self.min[k]),
                fmt_f64(self.max[k]),
                fmt_f64(self.sup_increment[k])
            )?;
        }
        Ok(())
    }
}

/// Half-lag trend at snapshot `s`: per-node change since snapshot `s / 2`, divided by the elapsed
/// time. Returns `(min rate, max rate)` over nodes.
fn half_lag_rates(snaps: &[Vec<f64>], times: &[f64], s: usize) -> (f64, f64) {
    let a = s / 2;
    let span = times[s] - times[a];
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in snaps[s].iter().zip(&snaps[a]) {
        let r = (x - y) / span;
        lo = lo.min(r);
        hi = hi.max(r);
    }
    (lo, hi)
}

/// Iterates the one-step operator up to `t_final`, recording diagnostics.
///
/// Outcomes:
/// - `Converged`: all per-step sup increments in the last window are below `tol_conv`;
/// - `DivergedUp` / `DivergedDown`: at three consecutive window checkpoints, every node moved in
///   the same direction since half the elapsed time, the slowest such rate exceeds the drift
///   threshold (or the values passed `U_cap`), and the rate is not decaying (it keeps at least 80%
///   of its value from half the elapsed time earlier). Bounded orbits fail the last test, since
///   their half-lag rate decays like `1/t`;
/// - `Periodic`: at `t_final`, the state matches its value one probe period earlier within
///   `tol_conv`;
/// - `MaxTime` otherwise.
pub fn evolve(
    prop: &Propagator,
    w0: &GridFunction,
    t_final: f64,
    stop: &StopRule,
    dir: Direction,
) -> Result<EvolutionTrace, SemigroupError> {
    let dt = prop.dt();
    let ratio = t_final / dt;
    if !(ratio >= 0.0) || (ratio - ratio.round()).abs() > 1e-6 * ratio.max(1.0) {
        return Err(SemigroupError::InvalidConfig(format!("t_final = {t_final} is not a multiple of dt = {dt}")));
    }
    let n_steps = ratio.round() as usize;
    let snap_every = ((0.5 / dt).round() as usize).max(1);
    let snap_time = snap_every as f64 * dt;
    let window_snaps = ((stop.window / snap_time).round() as usize).max(1);
    let window_steps = window_snaps * snap_every;

    let mut w = w0.clone();
    let mut times = vec![0.0];
    let mut mins = vec![w.min()];
    let mut maxs = vec![w.max()];
    let mut incs = vec![0.0];
    let mut snapshots = Vec::new();
    if stop.snapshot_stride > 0 {
        snapshots.push((0.0, w.clone()));
    }
    let mut ladder: Vec<Vec<f64>> = vec![w.values().to_vec()];
    let mut ladder_t = vec![0.0];
    let mut quiet_steps = 0usize;
    let mut trend_hits = (0usize, 0usize);
    let mut outcome = StopReason::MaxTime;
    let mut drift = None;

    for k in 1..=n_steps {
        let next = prop.step(dir, &w)?;
        let inc = next.values().iter().zip(w.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        w = next;
        let t = k as f64 * dt;
        times.push(t);
        mins.push(w.min());
        maxs.push(w.max());
        incs.push(inc);
        if stop.snapshot_stride > 0 && k % stop.snapshot_stride == 0 {
            snapshots.push((t, w.clone()));
        }
        quiet_steps = if inc < stop.tol_conv { quiet_steps + 1 } else { 0 };

        if w.sup_norm() > 1e12 {
            outcome = if w.min() > 0.0 { StopReason::DivergedUp } else { StopReason::DivergedDown };
            drift = Some((mins[k] - mins[k - 1]) / dt);
            break;
        }
        if quiet_steps >= window_steps {
            outcome = StopReason::Converged;
            if stop.early_stop {
                break;
            }
        }
        if k % snap_every != 0 {
            continue;
        }
        ladder.push(w.values().to_vec());
        ladder_t.push(t);
        let s = ladder.len() - 1;
        if !s.is_multiple_of(window_snaps) || s < 8 * window_snaps {
            continue;
        }
        let (lo, hi) = half_lag_rates(&ladder, &ladder_t, s);
        let (lo_prev, hi_prev) = half_lag_rates(&ladder, &ladder_t, s / 2);
        let up = lo > 0.0 && (lo >= stop.drift_threshold || w.min() > stop.u_cap) && lo >= 0.8 * lo_prev;
        let down = hi < 0.0 && (-hi >= stop.drift_threshold || w.max() < -stop.u_cap) && hi <= 0.8 * hi_prev;
        trend_hits = (if up { trend_hits.0 + 1 } else { 0 }, if down { trend_hits.1 + 1 } else { 0 });
        if trend_hits.0 >= 3 {
            outcome = StopReason::DivergedUp;
            drift = Some(lo);
        } else if trend_hits.1 >= 3 {
            outcome = StopReason::DivergedDown;
            drift = Some(hi);
        }
        if outcome != StopReason::MaxTime && stop.early_stop {
            break;
        }
    }

    if outcome == StopReason::MaxTime {
        let last = ladder.len() - 1;
        let t_last = ladder_t[last];
        for &p in &stop.periods {
            let back = (p / snap_time).round() as usize;
            if back == 0 || back > last || (times.last().copied().unwrap_or(0.0) - t_last).abs() > 1e-9 {
                continue;
            }
            let gap = ladder[last]
                .iter()
                .zip(&ladder[last - back])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if gap < stop.tol_conv {
                outcome = StopReason::Periodic { period: back as f64 * snap_time };
                break;
            }
        }
    }

    Ok(EvolutionTrace {
        direction: dir,
        c: prop.config().c,
        dt,
        times,
        min: mins,
        max: maxs,
        sup_increment: incs,
        snapshot_stride: stop.snapshot_stride,
        snapshots,
        stop: outcome,
        drift_rate: drift,
        final_state: w,
    })
}

// ---------------------------------------------------------------------------------------------
// property checks

/// One checked property.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropertyItem {
    pub name: String,
    pub passed: bool,
    /// Worst observed value of the checked quantity (violation count, ratio or excess).
    pub worst: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropertyReport {
    pub items: Vec<PropertyItem>,
}

impl PropertyReport {
    pub fn all_passed(&self) -> bool {
        self.items.iter().all(|i| i.passed)
    }

    pub fn item(&self, name: &str) -> Option<&PropertyItem> {
        self.items.iter().find(|i| i.name == name)
    }
}

/// Checks the structural semigroup properties on sample pairs `(phi, psi)` and step counts.
///
/// Items: `monotonicity` (exact, both directions), `expansiveness`
/// (`|T phi - T psi| <= e^{lambda t} |phi - psi| (1 + 10 dt)`), `composition` (`T_{a+b} = T_a T_b`
/// bit for bit), `identity` (`T_0 = id`), and `ordering` (`psi <= T^- phi` implies
/// `T^+ psi <= phi + slack`).
pub fn semigroup_property_suite(
    prop: &Propagator,
    samples: &[(GridFunction, GridFunction)],
    steps: &[usize],
    ordering_slack: f64,
) -> Result<PropertyReport, SemigroupError> {
    let dt = prop.dt();
    let lambda = prop.model().lambda_bound();
    let mut mono_violations = 0usize;
    let mut worst_ratio: f64 = 0.0;
    let mut comp_mismatch = 0usize;
    let mut id_mismatch = 0usize;
    let mut ordering_excess = f64::NEG_INFINITY;

    for (phi, psi) in samples {
        let lo = pointwise(phi, psi, f64::min);
        let hi = pointwise(phi, psi, f64::max);
        for dir in [Direction::Backward, Direction::Forward] {
            if prop.apply(dir, phi, 0)? != *phi {
                id_mismatch += 1;
            }
            let (a, b) = (prop.step(dir, &lo)?, prop.step(dir, &hi)?);
            mono_violations += a.values().iter().zip(b.values()).filter(|(x, y)| x > y).count();
        }
        let dist = phi.sup_metrics(psi)?.sup_norm_diff;
        for &k in steps {
            let t = k as f64 * dt;
            for dir in [Direction::Backward, Direction::Forward] {
                let a = prop.apply(dir, phi, k)?;
                let b = prop.apply(dir, psi, k)?;
                let d = a.sup_metrics(&b)?.sup_norm_diff;
                let bound = (lambda * t).exp() * dist * (1.0 + 10.0 * dt);
                let ratio = if dist > 0.0 { d / bound } else if d > 0.0 { f64::INFINITY } else { 0.0 };
                worst_ratio = worst_ratio.max(ratio);
            }
            let half = k / 2;
            let whole = prop.apply(Direction::Backward, phi, k)?;
            let split = prop.apply(Direction::Backward, &prop.apply(Direction::Backward, phi, half)?, k - half)?;
            if whole != split {
                comp_mismatch += 1;
            }
            // psi' = min(psi, T^- phi) satisfies the hypothesis of the ordering equivalence
            let below = pointwise(psi, &whole, f64::min);
            let lifted = prop.apply(Direction::Forward, &below, k)?;
            let excess = lifted.sup_metrics(phi)?.max_diff;
            ordering_excess = ordering_excess.max(excess);
        }
    }
    let ordering_excess = if ordering_excess.is_finite() { ordering_excess } else { 0.0 };
    Ok(PropertyReport {
        items: vec![
            PropertyItem { name: "monotonicity".into(), passed: mono_violations == 0, worst: mono_violations as f64 },
            PropertyItem { name: "expansiveness".into(), passed: worst_ratio <= 1.0, worst: worst_ratio },
            PropertyItem { name: "composition".into(), passed: comp_mismatch == 0, worst: comp_mismatch as f64 },
            PropertyItem { name: "identity".into(), passed: id_mismatch == 0, worst: id_mismatch as f64 },
            PropertyItem {
                name: "ordering".into(),
                passed: ordering_excess <= ordering_slack,
                worst: ordering_excess,
            },
        ],
    })
}

fn pointwise(a: &GridFunction, b: &GridFunction, op: impl Fn(f64, f64) -> f64) -> GridFunction {
    let vals = a.values().iter().zip(b.values()).map(|(x, y)| op(*x, *y)).collect();
    GridFunction::from_values_unchecked(a.grid(), vals)
}

/// Worst violations of the duality inequalities after `n` steps:
/// `lower = max(w - T^- T^+ w, 0)` and `upper = max(T^+ T^- w - w, 0)`.
pub fn duality_violations(prop: &Propagator, w: &GridFunction, n: usize) -> Result<(f64, f64), SemigroupError> {
    let fb = prop.apply(Direction::Backward, &prop.apply(Direction::Forward, w, n)?, n)?;
    let bf = prop.apply(Direction::Forward, &prop.apply(Direction::Backward, w, n)?, n)?;
    let lower = w.sup_metrics(&fb)?.max_diff.max(0.0);
    let upper = bf.sup_metrics(w)?.max_diff.max(0.0);
    Ok((lower, upper))
}
