//! Implicit action functions by dynamic programming on a torus grid.
//!
//! The forward action `h_{x0,u0}(x, t)` is the value at `(x, t)` of the minimal solution of
//! `u' = L(γ, u, γ') + c` along curves from `(x0, u0)`; the backward action `h^{x0,u0}(x, t)` is
//! its dual, running the curve from `x` back to `x0`. Both are approximated by one-step recursions
//! over grid nodes:
//!
//! ```text
//! forward:  h_{k+1}(x) = min_y h_k(y) + dt (L(y, h_k(y), (x - y)/dt) + c)
//! backward: h_{k+1}(x) = max_y h_k(y) - dt (L(x, h_k(y), (y - x)/dt) + c)
//! ```
//!
//! with `y` ranging over nodes within `v_max dt` of `x`. Because candidates are nodes only, the
//! discrete Markov property holds to rounding. The point constraint at `x0` is replaced by a finite
//! penalty: the seed layer is `u0` at the node nearest `x0` and `u0 ± P` elsewhere.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::grid::{displacement, norm, wrap_point, GridError, GridFunction, Point, TorusGrid, MAX_DIM};
use crate::hamiltonian::{HamiltonianError, HamiltonianModel, NodeTerms};

/// Default `penalty_scale`: the seed penalty is `P = penalty_scale (1 + |u0|)`.
pub const DEFAULT_PENALTY_SCALE: f64 = 50.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ActionError {
    #[error("step restrictions violated: {0}")]
    CflViolated(String),
    #[error("seed penalty still dominates at t = {t} (wash-out time {t_wash}); use a longer horizon")]
    PenaltyDominates { t: f64, t_wash: f64 },
    #[error("predecessor chain broken at layer {layer}")]
    BrokenChain { layer: usize },
    #[error("layer {requested} requested but the field has {available} steps")]
    LayerOutOfRange { requested: usize, available: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Hamiltonian(#[from] HamiltonianError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    /// `h_{x0,u0}`: inf-recursion, curves start at `x0`.
    Forward,
    /// `h^{x0,u0}`: sup-recursion, curves end at `x0`.
    Backward,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionParams {
    pub x0: Point,
    pub u0: f64,
    pub c: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub v_max: f64,
    pub penalty_scale: f64,
}

impl ActionParams {
    pub fn new(x0: Point, u0: f64, c: f64, dt: f64, n_steps: usize, v_max: f64) -> Self {
        Self { x0, u0, c, dt, n_steps, v_max, penalty_scale: DEFAULT_PENALTY_SCALE }
    }

    /// Number of steps to reach time `t` (rounded to the nearest step).
    pub fn steps_for(t: f64, dt: f64) -> usize {
        (t / dt).round().max(0.0) as usize
    }
}

/// One point of a backtracked minimizing curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub t: f64,
    pub x: Point,
    pub u: f64,
}

/// Node offsets reachable in one step, with their displacement and velocity cost.
#[derive(Clone, Debug)]
pub(crate) struct NodeStencil {
    pub offsets: Vec<[isize; MAX_DIM]>,
    pub displacements: Vec<Point>,
}

impl NodeStencil {
    pub(crate) fn new(grid: &TorusGrid, radius: f64) -> Self {
        let h = grid.spacing();
        let n = grid.n_per_dim() as isize;
        // keep offsets strictly inside half the torus so no node is reached twice
        let reach = ((radius / h).floor() as isize).min((n - 1) / 2);
        let mut offsets = Vec::new();
        let mut displacements = Vec::new();
        let range = -reach..=reach;
        let second: Vec<isize> = if grid.dim() == 2 { range.clone().collect() } else { vec![0] };
        for &j in &second {
            for i in range.clone() {
                let o = [i as f64 * h, j as f64 * h];
                if norm(o) <= radius * (1.0 + 1e-12) {
                    offsets.push([i, j]);
                    displacements.push(o);
                }
            }
        }
        Self { offsets, displacements }
    }
}

/// Layers of a discrete implicit action function, immutable once built.
#[derive(Clone, Debug)]
pub struct ActionField {
    kind: ActionKind,
    model: HamiltonianModel,
    grid: TorusGrid,
    params: ActionParams,
    penalty: f64,
    seed_node: usize,
    layers: Vec<Vec<f64>>,
    /// `predecessor[k][i]`: node at layer `k` feeding node `i` at layer `k + 1`.
    predecessor: Vec<Vec<u32>>,
}

/// Builds `h_{x0,u0}` (inf-recursion with `+P` seed).
pub fn forward_action(
    model: &HamiltonianModel,
    grid: &TorusGrid,
    params: ActionParams,
) -> Result<ActionField, ActionError> {
    build(ActionKind::Forward, model, grid, params)
}

/// Builds `h^{x0,u0}` (sup-recursion with `-P` seed).
pub fn backward_action(
    model: &HamiltonianModel,
    grid: &TorusGrid,
    params: ActionParams,
) -> Result<ActionField, ActionError> {
    build(ActionKind::Backward, model, grid, params)
}

fn check_params(model: &HamiltonianModel, grid: &TorusGrid, p: &ActionParams) -> Result<(), ActionError> {
    grid.require_solver_resolution()?;
    if model.dim() != grid.dim() {
        return Err(GridError::Dimension(model.dim()).into());
    }
    if !(p.dt > 0.0 && p.dt.is_finite()) {
        return Err(ActionError::CflViolated(format!("dt = {} must be positive", p.dt)));
    }
    if p.dt * model.lambda_bound() >= 0.5 {
        return Err(ActionError::CflViolated(format!(
            "dt * lambda = {} must be below 1/2",
            p.dt * model.lambda_bound()
        )));
    }
    if p.v_max * p.dt < 2.0 * grid.spacing() {
        return Err(ActionError::CflViolated(format!(
            "v_max * dt = {} must reach at least two cells ({})",
            p.v_max * p.dt,
            2.0 * grid.spacing()
        )));
    }
    if !(p.penalty_scale > 0.0) || !p.u0.is_finite() || !p.c.is_finite() {
        return Err(ActionError::CflViolated("penalty_scale, u0 and c must be finite, penalty positive".into()));
    }
    Ok(())
}

fn build(
    kind: ActionKind,
    model: &HamiltonianModel,
    grid: &TorusGrid,
    params: ActionParams,
) -> Result<ActionField, ActionError> {
    check_params(model, grid, &params)?;
    let penalty = params.penalty_scale * (1.0 + params.u0.abs());
    let seed_node = grid.nearest_node(params.x0);
    let rest = match kind {
        ActionKind::Forward => params.u0 + penalty,
        ActionKind::Backward => params.u0 - penalty,
    };
    let mut seed = vec![rest; grid.len()];
    seed[seed_node] = params.u0;

    let stencil = NodeStencil::new(grid, params.v_max * params.dt);
    let costs: Vec<f64> = stencil
        .displacements
        .iter()
        .map(|o| model.velocity_cost(scale(*o, 1.0 / params.dt)))
        .collect();
    let terms = NodeTerms::new(model, grid);

    let mut layers = Vec::with_capacity(params.n_steps + 1);
    let mut predecessor = Vec::with_capacity(params.n_steps);
    layers.push(seed);
    for _ in 0..params.n_steps {
        let prev = layers.last().unwrap();
        let out: Vec<(f64, u32)> = (0..grid.len())
            .into_par_iter()
            .map(|i| node_update(kind, model, grid, &terms, &stencil, &costs, &params, prev, i))
            .collect::<Result<_, _>>()?;
        let (vals, preds): (Vec<f64>, Vec<u32>) = out.into_iter().unzip();
        layers.push(vals);
        predecessor.push(preds);
    }

    let field = ActionField { kind, model: model.clone(), grid: *grid, params, penalty, seed_node, layers, predecessor };
    if params.n_steps > 0 {
        let last = field.layers.last().unwrap();
        let stuck = last.iter().any(|v| (v - rest).abs() < 0.01 * penalty);
        if stuck {
            return Err(ActionError::PenaltyDominates { t: field.final_time(), t_wash: field.wash_out_time() });
        }
    }
    Ok(field)
}

#[inline]
fn scale(v: Point, s: f64) -> Point {
    [v[0] * s, v[1] * s]
}

#[allow(clippy::too_many_arguments)]
fn node_update(
    kind: ActionKind,
    model: &HamiltonianModel,
    grid: &TorusGrid,
    terms: &NodeTerms,
    stencil: &NodeStencil,
    costs: &[f64],
    params: &ActionParams,
    prev: &[f64],
    i: usize,
) -> Result<(f64, u32), ActionError> {
    let dt = params.dt;
    let x = grid.node(i);
    let mut best = f64::NAN;
    let mut best_j = u32::MAX;
    for (k, off) in stencil.offsets.iter().enumerate() {
        let o = stencil.displacements[k];
        let v = scale(o, 1.0 / dt);
        let cand = match kind {
            ActionKind::Forward => {
                let j = grid.shifted(i, [-off[0], -off[1]]);
                let w = prev[j];
                let l = terms.lagrangian(model, j, grid.node(j), w, v, costs[k])?;
                (w + dt * (l + params.c), j)
            }
            ActionKind::Backward => {
                let j = grid.shifted(i, *off);
                let w = prev[j];
                let l = terms.lagrangian(model, i, x, w, v, costs[k])?;
                (w - dt * (l + params.c), j)
            }
        };
        if better(kind, cand.0, cand.1 as u32, best, best_j) {
            best = cand.0;
            best_j = cand.1 as u32;
        }
    }
    Ok((best, best_j))
}

/// Strict improvement, ties resolved toward the lower node index.
#[inline]
fn better(kind: ActionKind, val: f64, idx: u32, best: f64, best_idx: u32) -> bool {
    if best.is_nan() {
        return true;
    }
    let strictly = match kind {
        ActionKind::Forward => val < best,
        ActionKind::Backward => val > best,
    };
    strictly || (val == best && idx < best_idx)
}

impl ActionField {
    pub fn kind(&self) -> ActionKind {
        self.kind
    }

    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    pub fn params(&self) -> &ActionParams {
        &self.params
    }

    pub fn u0(&self) -> f64 {
        self.params.u0
    }

    pub fn x0(&self) -> Point {
        self.params.x0
    }

    pub fn c_shift(&self) -> f64 {
        self.params.c
    }

    pub fn dt(&self) -> f64 {
        self.params.dt
    }

    pub fn penalty(&self) -> f64 {
        self.penalty
    }

    pub fn seed_node(&self) -> usize {
        self.seed_node
    }

    pub fn n_steps(&self) -> usize {
        self.params.n_steps
    }

    pub fn final_time(&self) -> f64 {
        self.params.n_steps as f64 * self.params.dt
    }

    /// Time after which every node can be reached from the seed: `diameter / v_max`.
    pub fn wash_out_time(&self) -> f64 {
        self.grid.diameter() / self.params.v_max
    }

    pub fn layer(&self, k: usize) -> Result<GridFunction, ActionError> {
        let vals = self.layers.get(k).ok_or(ActionError::LayerOutOfRange {
            requested: k,
            available: self.params.n_steps,
        })?;
        Ok(GridFunction::from_values_unchecked(self.grid, vals.clone()))
    }

    /// Layer nearest to time `t`.
    pub fn layer_at(&self, t: f64) -> Result<GridFunction, ActionError> {
        self.layer(ActionParams::steps_for(t, self.params.dt))
    }

    /// Raw values of layer `k`.
    pub fn layer_values(&self, k: usize) -> &[f64] {
        &self.layers[k]
    }

    /// Value at an arbitrary point `x` and layer `k`.
    ///
    /// At nodes this is the stored layer; elsewhere the one-step recursion is evaluated at `x`
    /// from layer `k - 1`, so the value is consistent with [`backtrack_minimizer`].
    pub fn value(&self, x: Point, k: usize) -> Result<f64, ActionError> {
        Ok(self.value_and_source(x, k)?.0)
    }

    /// Value at `(x, t)` with `t` rounded to the nearest step.
    pub fn value_at_time(&self, x: Point, t: f64) -> Result<f64, ActionError> {
        self.value(x, ActionParams::steps_for(t, self.params.dt))
    }

    fn value_and_source(&self, x: Point, k: usize) -> Result<(f64, Option<usize>), ActionError> {
        if k > self.params.n_steps {
            return Err(ActionError::LayerOutOfRange { requested: k, available: self.params.n_steps });
        }
        let dim = self.grid.dim();
        let x = wrap_point(x, dim);
        let node = self.grid.nearest_node(x);
        if norm(displacement(self.grid.node(node), x, dim)) < 1e-12 * self.grid.spacing() {
            let src = (k > 0).then(|| self.predecessor[k - 1][node] as usize);
            return Ok((self.layers[k][node], src));
        }
        if k == 0 {
            return Ok((GridFunction::from_values_unchecked(self.grid, self.layers[0].clone()).interpolate(x), None));
        }
        let prev = &self.layers[k - 1];
        let dt = self.params.dt;
        let radius = self.params.v_max * dt;
        let mut best = f64::NAN;
        let mut best_j = u32::MAX;
        // candidate nodes: the stencil around the nearest node, filtered by the true distance
        let stencil = NodeStencil::new(&self.grid, radius + self.grid.spacing() * (dim as f64).sqrt());
        for off in &stencil.offsets {
            let j = self.grid.shifted(node, *off);
            let y = self.grid.node(j);
            let cand = match self.kind {
                ActionKind::Forward => {
                    let o = displacement(y, x, dim);
                    if norm(o) > radius {
                        continue;
                    }
                    let l = self.model.lagrangian_value(y, prev[j], scale(o, 1.0 / dt))?;
                    prev[j] + dt * (l + self.params.c)
                }
                ActionKind::Backward => {
                    let o = displacement(x, y, dim);
                    if norm(o) > radius {
                        continue;
                    }
                    let l = self.model.lagrangian_value(x, prev[j], scale(o, 1.0 / dt))?;
                    prev[j] - dt * (l + self.params.c)
                }
            };
            if better(self.kind, cand, j as u32, best, best_j) {
                best = cand;
                best_j = j as u32;
            }
        }
        if best.is_nan() {
            return Err(ActionError::BrokenChain { layer: k });
        }
        Ok((best, Some(best_j as usize)))
    }

    /// CSV export of layer `k`.
    pub fn write_layer_csv<W: std::io::Write>(&self, k: usize, out: W) -> Result<(), ActionError> {
        self.layer(k)?
            .write_csv(out)
            .map_err(|e| ActionError::Grid(GridError::Csv(e.to_string())))
    }
}

/// Follows predecessor links from `x` at the final layer back to the seed.
///
/// Points are returned in curve-time order. For a forward field the curve runs from the seed node
/// (`t = 0`) to `x` (`t = T`); for a backward field it runs from `x` (`t = 0`) to the seed node
/// (`t = T`). The `u` entry is the field value at the point and its layer.
pub fn backtrack_minimizer(field: &ActionField, x: Point) -> Result<Vec<CurvePoint>, ActionError> {
    let n = field.params.n_steps;
    if n == 0 {
        return Err(ActionError::BrokenChain { layer: 0 });
    }
    let dt = field.params.dt;
    let dim = field.grid.dim();
    let mut pts = Vec::with_capacity(n + 1);
    let (u_end, src) = field.value_and_source(x, n)?;
    pts.push((n, wrap_point(x, dim), u_end));
    let mut node = src.ok_or(ActionError::BrokenChain { layer: n })?;
    for k in (0..n).rev() {
        pts.push((k, field.grid.node(node), field.layers[k][node]));
        if k > 0 {
            let p = field.predecessor[k - 1][node];
            if p as usize >= field.grid.len() {
                return Err(ActionError::BrokenChain { layer: k });
            }
            node = p as usize;
        }
    }
    let curve: Vec<CurvePoint> = match field.kind {
        ActionKind::Forward => {
            pts.reverse();
            pts.into_iter().map(|(k, x, u)| CurvePoint { t: k as f64 * dt, x, u }).collect()
        }
        ActionKind::Backward => pts.into_iter().map(|(k, x, u)| CurvePoint { t: (n - k) as f64 * dt, x, u }).collect(),
    };
    Ok(curve)
}

/// `|h^{y, h_{x0,u0}(y,t)}(x0, t) - u0|`: forward action to node `y`, then backward action from
/// `(y, u)` evaluated back at `x0`.
pub fn reversibility_error(
    model: &HamiltonianModel,
    grid: &TorusGrid,
    params: ActionParams,
    y: Point,
) -> Result<f64, ActionError> {
    let fwd = forward_action(model, grid, params)?;
    let y = grid.node(grid.nearest_node(y));
    let u = fwd.value(y, params.n_steps)?;
    let back = backward_action(model, grid, ActionParams { x0: y, u0: u, ..params })?;
    let x0 = grid.node(fwd.seed_node());
    Ok((back.value(x0, params.n_steps)? - params.u0).abs())
}
