//! Contact Hamiltonians `H(x, u, p)` and their Lagrangians.
//!
//! Every catalog entry has the separable form
//!
//! ```text
//! H(x, u, p) = k |p|^2 + V(x) + g(x) u + f(u)
//! L(x, u, v) = |v|^2 / (4k) - V(x) - g(x) u - f(u)
//! ```
//!
//! where `V` and `g` are truncated Fourier series (summed over the axes in 2-D) and `f` is one of a
//! few scaled scalar functions. All derivatives are analytic. The numeric Legendre transform in
//! [`legendre`] only uses `H`, `H_p` and `H_pp`, so it does not rely on the closed form.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{dot, norm, Point, MAX_DIM};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HamiltonianError {
    #[error("unknown model {0:?} (expected quadratic, quadratic_plus_f, linear_in_u or mechanical)")]
    UnknownModel(String),
    #[error("model {model:?} requires parameter {param:?}")]
    MissingParam { model: String, param: String },
    #[error("model {model:?} does not take parameter {param:?}")]
    UnknownParam { model: String, param: String },
    #[error("invalid value for parameter {param:?}: {reason}")]
    InvalidParam { param: String, reason: String },
    #[error("sampled |dH/du| = {observed} exceeds the declared bound {declared}")]
    LambdaBoundViolated { declared: f64, observed: f64 },
    #[error("unsupported dimension {0}")]
    Dimension(usize),
    #[error("maximizer of p.v - H lies on the search boundary |p| = {radius}; increase the radius")]
    RadiusTooSmall { radius: f64 },
    #[error("ascent for the Legendre transform failed to converge; H does not look strictly convex in p")]
    NonConcaveDetected,
}

/// A parameter value in a [`ModelSpec`]: a number, a coefficient list or a name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Number(f64),
    List(Vec<f64>),
    Text(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, ParamValue>,
}

impl ModelSpec {
    pub fn new(name: &str) -> Self {
        Self { name: name.to_string(), params: BTreeMap::new() }
    }

    pub fn with(mut self, key: &str, value: ParamValue) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    pub fn with_number(self, key: &str, value: f64) -> Self {
        self.with(key, ParamValue::Number(value))
    }

    pub fn with_text(self, key: &str, value: &str) -> Self {
        self.with(key, ParamValue::Text(value.to_string()))
    }

    pub fn with_list(self, key: &str, value: &[f64]) -> Self {
        self.with(key, ParamValue::List(value.to_vec()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarShape {
    Zero,
    Identity,
    Sin,
    Tanh,
    Atan,
}

/// `f(u) = amplitude * shape(rate * u)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarTerm {
    pub shape: ScalarShape,
    pub amplitude: f64,
    pub rate: f64,
}

impl ScalarTerm {
    pub const ZERO: ScalarTerm = ScalarTerm { shape: ScalarShape::Zero, amplitude: 0.0, rate: 1.0 };

    #[inline]
    pub fn value(&self, u: f64) -> f64 {
        let s = self.rate * u;
        let g = match self.shape {
            ScalarShape::Zero => return 0.0,
            ScalarShape::Identity => s,
            ScalarShape::Sin => s.sin(),
            ScalarShape::Tanh => s.tanh(),
            ScalarShape::Atan => s.atan(),
        };
        self.amplitude * g
    }

    #[inline]
    pub fn derivative(&self, u: f64) -> f64 {
        let s = self.rate * u;
        let dg = match self.shape {
            ScalarShape::Zero => return 0.0,
            ScalarShape::Identity => 1.0,
            ScalarShape::Sin => s.cos(),
            ScalarShape::Tanh => {
                let t = s.tanh();
                1.0 - t * t
            }
            ScalarShape::Atan => 1.0 / (1.0 + s * s),
        };
        self.amplitude * self.rate * dg
    }

    /// `sup |f'|`.
    pub fn lipschitz(&self) -> f64 {
        match self.shape {
            ScalarShape::Zero => 0.0,
            _ => (self.amplitude * self.rate).abs(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.shape == ScalarShape::Zero || self.amplitude == 0.0
    }
}

/// `mean + sum_d sum_k (cos[k-1] cos(2 pi k x_d) + sin[k-1] sin(2 pi k x_d))`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FourierSeries {
    pub mean: f64,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl FourierSeries {
    pub fn constant(mean: f64) -> Self {
        Self { mean, cos: Vec::new(), sin: Vec::new() }
    }

    pub fn is_zero(&self) -> bool {
        self.mean == 0.0 && self.cos.iter().all(|c| *c == 0.0) && self.sin.iter().all(|s| *s == 0.0)
    }

    fn axis_value(&self, s: f64) -> f64 {
        let mut acc = 0.0;
        for (k, a) in self.cos.iter().enumerate() {
            acc += a * (TAU * (k + 1) as f64 * s).cos();
        }
        for (k, b) in self.sin.iter().enumerate() {
            acc += b * (TAU * (k + 1) as f64 * s).sin();
        }
        acc
    }

    fn axis_derivative(&self, s: f64) -> f64 {
        let mut acc = 0.0;
        for (k, a) in self.cos.iter().enumerate() {
            let w = TAU * (k + 1) as f64;
            acc -= a * w * (w * s).sin();
        }
        for (k, b) in self.sin.iter().enumerate() {
            let w = TAU * (k + 1) as f64;
            acc += b * w * (w * s).cos();
        }
        acc
    }

    pub fn value(&self, x: Point, dim: usize) -> f64 {
        self.mean + (0..dim).map(|d| self.axis_value(x[d])).sum::<f64>()
    }

    pub fn gradient(&self, x: Point, dim: usize) -> Point {
        let mut g = [0.0; MAX_DIM];
        for d in 0..dim {
            g[d] = self.axis_derivative(x[d]);
        }
        g
    }

    /// Upper bound on `sup_x |value|`.
    pub fn sup_bound(&self, dim: usize) -> f64 {
        let osc: f64 = self.cos.iter().chain(&self.sin).map(|c| c.abs()).sum();
        self.mean.abs() + dim as f64 * osc
    }
}

/// Partial derivatives of `H` at one point of `T*M x R`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HamiltonianGradient {
    pub dx: Point,
    pub du: f64,
    pub dp: Point,
}

/// Immutable evaluator bundle for a catalog Hamiltonian.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HamiltonianModel {
    name: String,
    dim: usize,
    kinetic: f64,
    potential: FourierSeries,
    coupling: FourierSeries,
    u_term: ScalarTerm,
    lambda_bound: f64,
    v_max_hint: Option<f64>,
    closed_form: bool,
}

impl HamiltonianModel {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Coefficient `k` of `k |p|^2`.
    pub fn kinetic(&self) -> f64 {
        self.kinetic
    }

    pub fn lambda_bound(&self) -> f64 {
        self.lambda_bound
    }

    pub fn v_max_hint(&self) -> Option<f64> {
        self.v_max_hint
    }

    pub fn potential(&self) -> &FourierSeries {
        &self.potential
    }

    pub fn coupling(&self) -> &FourierSeries {
        &self.coupling
    }

    pub fn u_term(&self) -> &ScalarTerm {
        &self.u_term
    }

    pub fn has_closed_form_lagrangian(&self) -> bool {
        self.closed_form
    }

    /// Drops the closed-form Lagrangian so that callers fall back to the numeric transform.
    pub fn without_closed_form(mut self) -> Self {
        self.closed_form = false;
        self
    }

    #[inline]
    pub fn potential_at(&self, x: Point) -> f64 {
        self.potential.value(x, self.dim)
    }

    #[inline]
    pub fn coupling_at(&self, x: Point) -> f64 {
        self.coupling.value(x, self.dim)
    }

    /// `V(x) + g(x) u + f(u)`, the part of `H` that does not depend on `p`.
    #[inline]
    pub fn state_term(&self, x: Point, u: f64) -> f64 {
        self.potential_at(x) + self.coupling_at(x) * u + self.u_term.value(u)
    }

    /// `|v|^2 / (4k)`, the Legendre dual of `k |p|^2`.
    #[inline]
    pub fn velocity_cost(&self, v: Point) -> f64 {
        dot(v, v) / (4.0 * self.kinetic)
    }

    #[inline]
    pub fn h(&self, x: Point, u: f64, p: Point) -> f64 {
        self.kinetic * dot(p, p) + self.state_term(x, u)
    }

    pub fn grad(&self, x: Point, u: f64, p: Point) -> HamiltonianGradient {
        let vx = self.potential.gradient(x, self.dim);
        let gx = self.coupling.gradient(x, self.dim);
        let mut dx = [0.0; MAX_DIM];
        let mut dp = [0.0; MAX_DIM];
        for d in 0..self.dim {
            dx[d] = vx[d] + gx[d] * u;
            dp[d] = 2.0 * self.kinetic * p[d];
        }
        HamiltonianGradient { dx, du: self.coupling_at(x) + self.u_term.derivative(u), dp }
    }

    /// `d^2 H / dp^2`.
    pub fn hess_p(&self, _x: Point, _u: f64, _p: Point) -> [[f64; MAX_DIM]; MAX_DIM] {
        let mut m = [[0.0; MAX_DIM]; MAX_DIM];
        for (d, row) in m.iter_mut().enumerate().take(self.dim) {
            row[d] = 2.0 * self.kinetic;
        }
        m
    }

    /// Closed-form Lagrangian, when the model carries one.
    pub fn lagrangian(&self, x: Point, u: f64, v: Point) -> Option<f64> {
        self.closed_form.then(|| self.velocity_cost(v) - self.state_term(x, u))
    }

    /// `L(x, u, v)`: the closed form if present, otherwise the numeric transform.
    pub fn lagrangian_value(&self, x: Point, u: f64, v: Point) -> Result<f64, HamiltonianError> {
        match self.lagrangian(x, u, v) {
            Some(l) => Ok(l),
            None => legendre(self, x, u, v, None).map(|r| r.value),
        }
    }

    /// `dL/dv`, the momentum conjugate to velocity `v` (inverse of `H_p`).
    pub fn momentum(&self, _x: Point, _u: f64, v: Point) -> Point {
        let mut p = [0.0; MAX_DIM];
        for d in 0..self.dim {
            p[d] = v[d] / (2.0 * self.kinetic);
        }
        p
    }

    /// `dL/du = -dH/du` at corresponding points.
    pub fn lagrangian_du(&self, x: Point, u: f64, _v: Point) -> f64 {
        -(self.coupling_at(x) + self.u_term.derivative(u))
    }

    /// Largest `|H_p|` over a sample of states with `|p| <= radius`.
    pub fn sampled_sup_dp(&self, radius: f64) -> f64 {
        let mut best: f64 = 0.0;
        for x in sample_points(self.dim, 8) {
            for &u in &[-2.0, 0.0, 2.0] {
                for p in sample_covectors(self.dim, radius) {
                    best = best.max(norm(self.grad(x, u, p).dp));
                }
            }
        }
        best
    }

    /// Stencil velocity bound: the model hint, else `4 (1 + sup |H_p|)` over `|p| <= 2`.
    pub fn default_v_max(&self) -> f64 {
        self.v_max_hint.unwrap_or_else(|| 4.0 * (1.0 + self.sampled_sup_dp(2.0)))
    }

    /// Largest sampled `|dH/du|`, over `u` in `[-20, 20]`.
    pub fn sampled_sup_du(&self) -> f64 {
        let mut best: f64 = 0.0;
        for x in sample_points(self.dim, 16) {
            for k in 0..=80 {
                let u = -20.0 + 0.5 * k as f64;
                best = best.max(self.grad(x, u, [0.0; MAX_DIM]).du.abs());
            }
        }
        best
    }
}

/// Samples of `V` and `g` at every node of a grid, so that Lagrangian evaluations inside solver
/// loops avoid re-summing the Fourier series.
#[derive(Clone, Debug)]
pub(crate) struct NodeTerms {
    potential: Vec<f64>,
    coupling: Vec<f64>,
}

impl NodeTerms {
    pub(crate) fn new(model: &HamiltonianModel, grid: &crate::grid::TorusGrid) -> Self {
        let potential = grid.nodes().map(|x| model.potential_at(x)).collect();
        let coupling = grid.nodes().map(|x| model.coupling_at(x)).collect();
        Self { potential, coupling }
    }

    /// `L(x_node, u, v)`, where `cost` is the precomputed `|v|^2 / (4k)`.
    #[inline]
    pub(crate) fn lagrangian(
        &self,
        model: &HamiltonianModel,
        node: usize,
        x: Point,
        u: f64,
        v: Point,
        cost: f64,
    ) -> Result<f64, HamiltonianError> {
        if model.closed_form {
            Ok(cost - self.potential[node] - self.coupling[node] * u - model.u_term.value(u))
        } else {
            legendre(model, x, u, v, None).map(|r| r.value)
        }
    }
}

fn sample_points(dim: usize, per_axis: usize) -> Vec<Point> {
    let s = |i: usize| (i as f64 + 0.37) / per_axis as f64;
    match dim {
        1 => (0..per_axis).map(|i| [s(i), 0.0]).collect(),
        _ => (0..per_axis * per_axis).map(|i| [s(i % per_axis), s(i / per_axis)]).collect(),
    }
}

fn sample_covectors(dim: usize, radius: f64) -> Vec<Point> {
    let mut out = Vec::new();
    for r in [0.25, 0.5, 1.0] {
        let r = r * radius;
        match dim {
            1 => {
                out.push([r, 0.0]);
                out.push([-r, 0.0]);
            }
            _ => {
                for k in 0..8 {
                    let a = PI * k as f64 / 4.0;
                    out.push([r * a.cos(), r * a.sin()]);
                }
            }
        }
    }
    out
}

struct Params<'a> {
    model: &'a str,
    map: &'a BTreeMap<String, ParamValue>,
    used: std::cell::RefCell<Vec<&'a str>>,
}

impl<'a> Params<'a> {
    fn new(spec: &'a ModelSpec) -> Self {
        Self { model: &spec.name, map: &spec.params, used: Default::default() }
    }

    fn raw(&self, key: &'a str) -> Option<&'a ParamValue> {
        self.used.borrow_mut().push(key);
        self.map.get(key)
    }

    fn number(&self, key: &'a str) -> Result<Option<f64>, HamiltonianError> {
        match self.raw(key) {
            None => Ok(None),
            Some(ParamValue::Number(v)) if v.is_finite() => Ok(Some(*v)),
            Some(other) => Err(invalid(key, format!("expected a finite number, got {other:?}"))),
        }
    }

    fn require_number(&self, key: &'a str) -> Result<f64, HamiltonianError> {
        self.number(key)?.ok_or_else(|| self.missing(key))
    }

    fn list(&self, key: &'a str) -> Result<Vec<f64>, HamiltonianError> {
        match self.raw(key) {
            None => Ok(Vec::new()),
            Some(ParamValue::List(v)) if v.iter().all(|c| c.is_finite()) => Ok(v.clone()),
            Some(ParamValue::Number(v)) if v.is_finite() => Ok(vec![*v]),
            Some(other) => Err(invalid(key, format!("expected a list of numbers, got {other:?}"))),
        }
    }

    fn missing(&self, key: &str) -> HamiltonianError {
        HamiltonianError::MissingParam { model: self.model.to_string(), param: key.to_string() }
    }

    fn finish(&self) -> Result<(), HamiltonianError> {
        let used = self.used.borrow();
        match self.map.keys().find(|k| !used.contains(&k.as_str())) {
            Some(k) => Err(HamiltonianError::UnknownParam {
                model: self.model.to_string(),
                param: k.clone(),
            }),
            None => Ok(()),
        }
    }

    fn fourier(&self, prefix: &'static str, required: bool) -> Result<FourierSeries, HamiltonianError> {
        let (mean_key, cos_key, sin_key) = match prefix {
            "potential" => ("potential_mean", "potential_cos", "potential_sin"),
            _ => ("factor_mean", "factor_cos", "factor_sin"),
        };
        let mean = match self.number(mean_key)? {
            Some(m) => m,
            None if required => return Err(self.missing(mean_key)),
            None => 0.0,
        };
        Ok(FourierSeries { mean, cos: self.list(cos_key)?, sin: self.list(sin_key)? })
    }

    fn scalar_term(&self, required: bool) -> Result<ScalarTerm, HamiltonianError> {
        let shape = match self.raw("f") {
            None if required => return Err(self.missing("f")),
            None => return Ok(ScalarTerm::ZERO),
            Some(ParamValue::Number(v)) if *v == 0.0 => ScalarShape::Zero,
            Some(ParamValue::Text(name)) => match name.as_str() {
                "zero" | "0" => ScalarShape::Zero,
                "identity" => ScalarShape::Identity,
                "sin" => ScalarShape::Sin,
                "tanh" | "tanh_scaled" => ScalarShape::Tanh,
                "atan" => ScalarShape::Atan,
                other => return Err(invalid("f", format!("unknown function {other:?}"))),
            },
            Some(other) => return Err(invalid("f", format!("unsupported value {other:?}"))),
        };
        let scaled = matches!(self.map.get("f"), Some(ParamValue::Text(t)) if t == "tanh_scaled");
        let (amplitude, rate) = if scaled {
            (self.require_number("a")?, self.require_number("b")?)
        } else {
            (self.number("a")?.unwrap_or(1.0), self.number("b")?.unwrap_or(1.0))
        };
        let amplitude = if shape == ScalarShape::Zero { 0.0 } else { amplitude };
        Ok(ScalarTerm { shape, amplitude, rate })
    }
}

fn invalid(param: &str, reason: String) -> HamiltonianError {
    HamiltonianError::InvalidParam { param: param.to_string(), reason }
}

/// Instantiates a catalog entry in dimension `dim`.
///
/// | name               | H                              | parameters                                   |
/// |--------------------|--------------------------------|----------------------------------------------|
/// | `quadratic`        | `k|p|^2`                       | `kinetic` (1)                                |
/// | `quadratic_plus_f` | `k|p|^2 + f(u)`                | `f` (required), `a`, `b`, `kinetic`          |
/// | `linear_in_u`      | `f(x) u + k|p|^2`              | `factor_mean` (required), `factor_cos/sin`, `kinetic` |
/// | `mechanical`       | `|p|^2/2 + V(x) + f(u)`        | `potential_mean/cos/sin`, `f`, `a`, `b`      |
///
/// `f` is one of `zero` (or the number 0), `identity`, `sin`, `tanh`, `atan`, or `tanh_scaled`
/// (which requires `a` and `b`); the term is `a * f(b u)`. Every entry also accepts `lambda`, a
/// declared bound on `|dH/du|` checked against samples, and `v_max_hint`.
pub fn build_model(spec: &ModelSpec, dim: usize) -> Result<HamiltonianModel, HamiltonianError> {
    if dim == 0 || dim > MAX_DIM {
        return Err(HamiltonianError::Dimension(dim));
    }
    let params = Params::new(spec);
    let positive_kinetic = |default: f64| -> Result<f64, HamiltonianError> {
        let k = params.number("kinetic")?.unwrap_or(default);
        if k <= 0.0 {
            return Err(invalid("kinetic", "must be positive".into()));
        }
        Ok(k)
    };
    let (kinetic, potential, coupling, u_term) = match spec.name.as_str() {
        "quadratic" => (positive_kinetic(1.0)?, FourierSeries::default(), FourierSeries::default(), ScalarTerm::ZERO),
        "quadratic_plus_f" => {
            (positive_kinetic(1.0)?, FourierSeries::default(), FourierSeries::default(), params.scalar_term(true)?)
        }
        "linear_in_u" => {
            (positive_kinetic(1.0)?, FourierSeries::default(), params.fourier("factor", true)?, ScalarTerm::ZERO)
        }
        "mechanical" => (0.5, params.fourier("potential", false)?, FourierSeries::default(), params.scalar_term(false)?),
        other => return Err(HamiltonianError::UnknownModel(other.to_string())),
    };
    let v_max_hint = params.number("v_max_hint")?;
    if matches!(v_max_hint, Some(v) if v <= 0.0) {
        return Err(invalid("v_max_hint", "must be positive".into()));
    }
    let declared = params.number("lambda")?;
    params.finish()?;

    let analytic = coupling.sup_bound(dim) + u_term.lipschitz();
    let mut model = HamiltonianModel {
        name: spec.name.clone(),
        dim,
        kinetic,
        potential,
        coupling,
        u_term,
        lambda_bound: analytic,
        v_max_hint,
        closed_form: true,
    };
    if let Some(declared) = declared {
        if declared < 0.0 {
            return Err(invalid("lambda", "must be nonnegative".into()));
        }
        let observed = model.sampled_sup_du();
        if observed > declared + 1e-12 {
            return Err(HamiltonianError::LambdaBoundViolated { declared, observed });
        }
        model.lambda_bound = declared;
    }
    Ok(model)
}

/// Result of the numeric Legendre transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LegendreValue {
    pub value: f64,
    pub argmax: Point,
}

/// Default search radius for quadratic-type kinetic terms: `2 (1 + |v|)`.
pub fn default_p_radius(v: Point) -> f64 {
    2.0 * (1.0 + norm(v))
}

/// `max_{|p| <= p_radius} p.v - H(x, u, p)` by a grid scan refined with damped Newton ascent.
///
/// `p_radius = None` uses [`default_p_radius`]. Fails with `RadiusTooSmall` when the maximizer sits
/// on the boundary of the search ball.
pub fn legendre(
    model: &HamiltonianModel,
    x: Point,
    u: f64,
    v: Point,
    p_radius: Option<f64>,
) -> Result<LegendreValue, HamiltonianError> {
    let radius = p_radius.unwrap_or_else(|| default_p_radius(v));
    assert!(radius > 0.0, "p_radius must be positive");
    let dim = model.dim();
    let objective = |p: Point| dot(p, v) - model.h(x, u, p);

    // coarse scan of the ball
    let per_axis: i64 = if dim == 1 { 400 } else { 60 };
    let step = 2.0 * radius / per_axis as f64;
    let mut best = ([0.0; MAX_DIM], f64::NEG_INFINITY);
    let range = 0..=per_axis;
    let mut visit = |p: Point| {
        if norm(p) <= radius * (1.0 + 1e-12) {
            let val = objective(p);
            if val > best.1 {
                best = (p, val);
            }
        }
    };
    if dim == 1 {
        for i in range {
            visit([-radius + step * i as f64, 0.0]);
        }
    } else {
        for i in range.clone() {
            for j in range.clone() {
                visit([-radius + step * i as f64, -radius + step * j as f64]);
            }
        }
    }
    let (mut p, mut value) = best;
    if norm(p) >= radius - 1.5 * step {
        return Err(HamiltonianError::RadiusTooSmall { radius });
    }

    // Newton ascent on p.v - H
    for _ in 0..100 {
        let g = model.grad(x, u, p);
        let mut resid = [0.0; MAX_DIM];
        for d in 0..dim {
            resid[d] = v[d] - g.dp[d];
        }
        if norm(resid) < 1e-10 {
            if norm(p) >= radius {
                return Err(HamiltonianError::RadiusTooSmall { radius });
            }
            return Ok(LegendreValue { value, argmax: p });
        }
        let dir = solve_spd(model.hess_p(x, u, p), resid, dim).ok_or(HamiltonianError::NonConcaveDetected)?;
        let mut t = 1.0;
        loop {
            let mut trial = p;
            for d in 0..dim {
                trial[d] += t * dir[d];
            }
            let tv = objective(trial);
            if tv >= value - 1e-14 * value.abs().max(1.0) {
                p = trial;
                value = tv;
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                return Err(HamiltonianError::NonConcaveDetected);
            }
        }
        if !value.is_finite() || norm(p) > 1e3 * radius {
            return Err(HamiltonianError::NonConcaveDetected);
        }
    }
    Err(HamiltonianError::NonConcaveDetected)
}

fn solve_spd(m: [[f64; MAX_DIM]; MAX_DIM], b: Point, dim: usize) -> Option<Point> {
    if dim == 1 {
        return (m[0][0] > 0.0).then(|| [b[0] / m[0][0], 0.0]);
    }
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if m[0][0] <= 0.0 || det <= 0.0 {
        return None;
    }
    Some([(m[1][1] * b[0] - m[0][1] * b[1]) / det, (m[0][0] * b[1] - m[1][0] * b[0]) / det])
}

/// Outcome of [`check_invariants`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InvariantReport {
    pub max_du: f64,
    pub lambda_ok: bool,
    pub min_second_difference: f64,
    pub convex_ok: bool,
    /// Smallest `L + H - p.v` over sampled `(v, p)`; must be `>= 0`.
    pub min_fenchel_gap: f64,
    /// Largest `|L + H - p.v|` at `p = H_p^{-1}(v)`; must vanish.
    pub max_fenchel_equality_error: f64,
    pub fenchel_ok: bool,
}

/// Samples the structural assumptions on a standard set of states: the `dH/du` bound, strict
/// convexity in `p` (second differences) and the Fenchel inequality for the closed-form `L`.
pub fn check_invariants(model: &HamiltonianModel) -> InvariantReport {
    let dim = model.dim();
    let max_du = model.sampled_sup_du();
    let mut min_second = f64::INFINITY;
    let mut min_gap = f64::INFINITY;
    let mut max_eq: f64 = 0.0;
    let dp = 1e-3;
    for x in sample_points(dim, 6) {
        for &u in &[-3.0, -0.5, 0.0, 1.2, 4.0] {
            for p in sample_covectors(dim, 3.0) {
                for d in 0..dim {
                    let mut plus = p;
                    let mut minus = p;
                    plus[d] += dp;
                    minus[d] -= dp;
                    let sd = (model.h(x, u, plus) - 2.0 * model.h(x, u, p) + model.h(x, u, minus)) / (dp * dp);
                    min_second = min_second.min(sd);
                }
                if model.lagrangian(x, u, [0.0; MAX_DIM]).is_some() {
                    for v in sample_covectors(dim, 4.0) {
                        let l = model.lagrangian(x, u, v).unwrap();
                        min_gap = min_gap.min(l + model.h(x, u, p) - dot(p, v));
                        let pv = model.momentum(x, u, v);
                        max_eq = max_eq.max((l + model.h(x, u, pv) - dot(pv, v)).abs());
                    }
                }
            }
        }
    }
    let fenchel_ok = !model.has_closed_form_lagrangian() || (min_gap >= -1e-12 && max_eq <= 1e-10);
    InvariantReport {
        max_du,
        lambda_ok: max_du <= model.lambda_bound() + 1e-12,
        min_second_difference: min_second,
        convex_ok: min_second > 0.0,
        min_fenchel_gap: if min_gap.is_finite() { min_gap } else { 0.0 },
        max_fenchel_equality_error: max_eq,
        fenchel_ok,
    }
}
