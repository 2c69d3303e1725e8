//! RK4 integration of the contact characteristic system
//!
//! ```text
//! x' = H_p,   p' = -H_x - H_u p,   u' = p . H_p - (H - c)
//! ```
//!
//! integrated for `H - c` by default (the unshifted flow is available through [`FlowOptions`]).
//! Along this flow `d(H - c)/dt = -H_u (H - c)`, so the level `H = c` is invariant.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::action_dp::{backtrack_minimizer, ActionError, ActionField};
use crate::grid::{displacement, dot, torus_distance, wrap_point, Point, MAX_DIM};
use crate::hamiltonian::HamiltonianModel;

/// Magnitude of `|p|` or `|u|` treated as blow-up.
pub const BLOW_UP_LIMIT: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("orbit left the bounded region (|p| or |u| > 1e6) at t = {t}")]
    BlowUp { t: f64, partial: Vec<CharacteristicState> },
    #[error("invalid integration request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Action(#[from] ActionError),
}

/// A point `(x, u, p)` of the contact phase space at time `t`; `x` is reduced mod 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CharacteristicState {
    pub t: f64,
    pub x: Point,
    pub u: f64,
    pub p: Point,
}

impl CharacteristicState {
    pub fn new(x: Point, u: f64, p: Point) -> Self {
        Self { t: 0.0, x, u, p }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowOptions {
    pub dt_ode: f64,
    pub c_level: f64,
    /// Integrate the flow of `H - c` (default) rather than that of `H`.
    pub shifted: bool,
}

impl FlowOptions {
    pub fn new(dt_ode: f64, c_level: f64) -> Self {
        Self { dt_ode, c_level, shifted: true }
    }
}

/// Default ODE step.
pub const DEFAULT_DT_ODE: f64 = 1e-3;

/// Phase point plus an auxiliary scalar integrated alongside.
#[derive(Clone, Copy, Debug)]
struct Ext {
    x: Point,
    u: f64,
    p: Point,
    aux: f64,
}

fn rhs(model: &HamiltonianModel, c: f64, s: &Ext) -> Ext {
    let dim = model.dim();
    let g = model.grad(s.x, s.u, s.p);
    let mut dp = [0.0; MAX_DIM];
    for d in 0..dim {
        dp[d] = -g.dx[d] - g.du * s.p[d];
    }
    Ext { x: g.dp, u: dot(s.p, g.dp) - (model.h(s.x, s.u, s.p) - c), p: dp, aux: g.du }
}

fn axpy(s: &Ext, k: &Ext, a: f64) -> Ext {
    Ext {
        x: [s.x[0] + a * k.x[0], s.x[1] + a * k.x[1]],
        u: s.u + a * k.u,
        p: [s.p[0] + a * k.p[0], s.p[1] + a * k.p[1]],
        aux: s.aux + a * k.aux,
    }
}

fn rk4(model: &HamiltonianModel, c: f64, s: &Ext, h: f64) -> Ext {
    let k1 = rhs(model, c, s);
    let k2 = rhs(model, c, &axpy(s, &k1, 0.5 * h));
    let k3 = rhs(model, c, &axpy(s, &k2, 0.5 * h));
    let k4 = rhs(model, c, &axpy(s, &k3, h));
    let mut out = *s;
    for d in 0..MAX_DIM {
        out.x[d] += h / 6.0 * (k1.x[d] + 2.0 * k2.x[d] + 2.0 * k3.x[d] + k4.x[d]);
        out.p[d] += h / 6.0 * (k1.p[d] + 2.0 * k2.p[d] + 2.0 * k3.p[d] + k4.p[d]);
    }
    out.u += h / 6.0 * (k1.u + 2.0 * k2.u + 2.0 * k3.u + k4.u);
    out.aux += h / 6.0 * (k1.aux + 2.0 * k2.aux + 2.0 * k3.aux + k4.aux);
    out
}

/// Integrates with fixed step, returning the extended states at every step.
fn integrate(
    model: &HamiltonianModel,
    s0: &CharacteristicState,
    t_span: f64,
    opts: &FlowOptions,
) -> Result<(Vec<CharacteristicState>, Vec<f64>), FlowError> {
    if !(opts.dt_ode > 0.0 && opts.dt_ode.is_finite()) {
        return Err(FlowError::InvalidRequest(format!("dt_ode = {} must be positive", opts.dt_ode)));
    }
    if !t_span.is_finite() {
        return Err(FlowError::InvalidRequest("t_span must be finite".into()));
    }
    let dim = model.dim();
    let c = if opts.shifted { opts.c_level } else { 0.0 };
    let n = (t_span.abs() / opts.dt_ode).round() as usize;
    let h = t_span.signum() * opts.dt_ode;
    let mut s = Ext { x: wrap_point(s0.x, dim), u: s0.u, p: s0.p, aux: 0.0 };
    let mut states = Vec::with_capacity(n + 1);
    let mut aux = Vec::with_capacity(n + 1);
    states.push(CharacteristicState { t: s0.t, x: s.x, u: s.u, p: s.p });
    aux.push(0.0);
    for k in 1..=n {
        s = rk4(model, c, &s, h);
        s.x = wrap_point(s.x, dim);
        let t = s0.t + k as f64 * h;
        let finite = s.u.is_finite() && s.p.iter().all(|v| v.is_finite());
        if !finite || s.u.abs() > BLOW_UP_LIMIT || s.p.iter().any(|v| v.abs() > BLOW_UP_LIMIT) {
            return Err(FlowError::BlowUp { t, partial: states });
        }
        states.push(CharacteristicState { t, x: s.x, u: s.u, p: s.p });
        aux.push(s.aux);
    }
    Ok((states, aux))
}

/// RK4 trajectory over `t_span` (negative spans integrate backward), sampled at every step.
pub fn flow(
    model: &HamiltonianModel,
    s0: &CharacteristicState,
    t_span: f64,
    dt_ode: f64,
    c_level: f64,
) -> Result<Vec<CharacteristicState>, FlowError> {
    flow_with(model, s0, t_span, &FlowOptions::new(dt_ode, c_level))
}

pub fn flow_with(
    model: &HamiltonianModel,
    s0: &CharacteristicState,
    t_span: f64,
    opts: &FlowOptions,
) -> Result<Vec<CharacteristicState>, FlowError> {
    integrate(model, s0, t_span, opts).map(|r| r.0)
}

/// Orbits of several seeds, integrated in parallel.
pub fn flow_batch(
    model: &HamiltonianModel,
    seeds: &[CharacteristicState],
    t_span: f64,
    opts: &FlowOptions,
) -> Vec<Result<Vec<CharacteristicState>, FlowError>> {
    seeds.par_iter().map(|s| flow_with(model, s, t_span, opts)).collect()
}

/// `H(x, u, p) - c` at a state.
pub fn level_defect(model: &HamiltonianModel, s: &CharacteristicState, c: f64) -> f64 {
    model.h(s.x, s.u, s.p) - c
}

/// `max_t |(H - c)(t) - (H - c)(0) exp(-int_0^t H_u)|` along the orbit from `s0`.
pub fn h_decay_check(
    model: &HamiltonianModel,
    s0: &CharacteristicState,
    t_span: f64,
    dt_ode: f64,
    c_level: f64,
) -> Result<f64, FlowError> {
    let opts = FlowOptions::new(dt_ode, c_level);
    let (states, aux) = integrate(model, s0, t_span, &opts)?;
    let e0 = level_defect(model, &states[0], c_level);
    Ok(states
        .iter()
        .zip(&aux)
        .map(|(s, a)| (level_defect(model, s, c_level) - e0 * (-a).exp()).abs())
        .fold(0.0, f64::max))
}

/// CSV with columns `t, x.., u, p.., H-c`.
pub fn write_orbit_csv<W: std::io::Write>(
    model: &HamiltonianModel,
    orbit: &[CharacteristicState],
    c_level: f64,
    mut out: W,
) -> std::io::Result<()> {
    use crate::fmt_f64;
    let dim = model.dim();
    let header = if dim == 1 { "t,x,u,p,h_minus_c" } else { "t,x1,x2,u,p1,p2,h_minus_c" };
    writeln!(out, "{header}")?;
    for s in orbit {
        let mut row = vec![fmt_f64(s.t)];
        row.extend((0..dim).map(|d| fmt_f64(s.x[d])));
        row.push(fmt_f64(s.u));
        row.extend((0..dim).map(|d| fmt_f64(s.p[d])));
        row.push(fmt_f64(level_defect(model, s, c_level)));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Result of [`calibrated_cross_check`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CrossCheck {
    /// `sup (d(x_dp, x_ode) + |u_dp - u_ode|)` over the compared window.
    pub distance: f64,
    pub t_start: f64,
    pub t_end: f64,
    /// Lifted terminal state the orbit was started from.
    pub lifted: CharacteristicState,
}

/// Compares the backtracked minimizer ending at `x` with the characteristic orbit through its lifted
/// terminal segment.
///
/// The last tenth of the curve is lifted at its midpoint: position and `u` are the segment
/// midpoints, the velocity is the mean velocity over the segment (second order there, where a lift
/// at the segment end would carry an `O(segment)` bias) and the momentum is `dL/dv`. The orbit is
/// integrated from the midpoint backward and forward and compared on the curve samples of the last
/// 80% of the curve.
pub fn calibrated_cross_check(
    model: &HamiltonianModel,
    field: &ActionField,
    x: Point,
    dt_ode: f64,
) -> Result<CrossCheck, FlowError> {
    let t_total = field.final_time();
    if t_total < field.wash_out_time() {
        return Err(ActionError::PenaltyDominates { t: t_total, t_wash: field.wash_out_time() }.into());
    }
    if t_total < 0.5 - 1e-12 {
        return Err(FlowError::InvalidRequest(format!("curve length {t_total} is below 0.5")));
    }
    let dim = model.dim();
    let curve = backtrack_minimizer(field, x)?;
    let n = curve.len() - 1;
    let dt = field.dt();
    let q = ((0.1 * t_total / dt).round() as usize).clamp(1, n);
    let (start, end) = (curve[n - q], curve[n]);
    let disp = displacement(start.x, end.x, dim);
    let span = q as f64 * dt;
    let v = [disp[0] / span, disp[1] / span];
    let xm = wrap_point([start.x[0] + 0.5 * disp[0], start.x[1] + 0.5 * disp[1]], dim);
    let um = 0.5 * (start.u + end.u);
    let lifted = CharacteristicState { t: 0.5 * (start.t + end.t), x: xm, u: um, p: model.momentum(xm, um, v) };

    // ODE step dividing half the DP step, so that orbit samples land on curve times
    let sub = (0.5 * dt / dt_ode).ceil().max(1.0) as usize;
    let h = 0.5 * dt / sub as f64;
    let back = ((0.8 * t_total) / dt).round() as usize;
    let first = n - back;
    let to_end = q * sub;
    let to_first = (2 * (back * sub)).saturating_sub(to_end);
    let opts = FlowOptions::new(h, field.c_shift());
    let behind = flow_with(model, &lifted, -(to_first as f64) * h, &opts)?;
    let ahead = flow_with(model, &lifted, to_end as f64 * h, &opts)?;
    // positions in ODE steps: curve sample j at 2 sub j, the midpoint at 2 sub n - q sub
    let mid = 2 * sub * n - to_end;
    let mut worst: f64 = 0.0;
    for (j, dp) in curve.iter().enumerate().skip(first) {
        let offset = 2 * sub * j;
        let ode = if offset <= mid { behind[mid - offset] } else { ahead[offset - mid] };
        worst = worst.max(torus_distance(dp.x, ode.x, dim) + (dp.u - ode.u).abs());
    }
    Ok(CrossCheck { distance: worst, t_start: curve[first].t, t_end: end.t, lifted })
}
