//! Uniform periodic grids on the flat torus `[0,1)^dim` and the grid functions living on them.
//!
//! Nodes are stored in a flat vector with the first axis varying fastest, so node `(i0, i1)` has
//! flat index `i0 + n * i1`. Every solver in this crate reads grid functions through the periodic
//! multilinear interpolant defined here.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest supported spatial dimension.
pub const MAX_DIM: usize = 2;

/// A point of the torus (or a tangent/cotangent vector). Coordinates past `dim` are zero.
pub type Point = [f64; MAX_DIM];

/// Smallest resolution accepted by the solvers.
pub const MIN_SOLVER_NODES: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("unsupported dimension {0} (expected 1 or 2)")]
    Dimension(usize),
    #[error("grid too coarse: {n} nodes per dimension, need at least {min}")]
    TooCoarse { n: usize, min: usize },
    #[error("grid mismatch: {0:?} vs {1:?}")]
    GridMismatch(TorusGrid, TorusGrid),
    #[error("expected {expected} values, got {got}")]
    Length { expected: usize, got: usize },
    #[error("non-finite value {value} at node {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("malformed grid CSV: {0}")]
    Csv(String),
}

/// Reduces every coordinate into `[0, 1)`.
pub fn wrap_point(x: Point, dim: usize) -> Point {
    let mut out = [0.0; MAX_DIM];
    for d in 0..dim {
        out[d] = wrap_coord(x[d]);
    }
    out
}

#[inline]
pub fn wrap_coord(s: f64) -> f64 {
    let r = s - s.floor();
    // s.floor() can round so that r == 1.0 for tiny negative s
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Shortest representative of `to - from` on the torus, each component in `[-1/2, 1/2)`.
pub fn displacement(from: Point, to: Point, dim: usize) -> Point {
    let mut out = [0.0; MAX_DIM];
    for d in 0..dim {
        let mut delta = to[d] - from[d];
        delta -= delta.round();
        if delta >= 0.5 {
            delta -= 1.0;
        }
        out[d] = delta;
    }
    out
}

/// Euclidean length of the shortest torus displacement between two points.
pub fn torus_distance(a: Point, b: Point, dim: usize) -> f64 {
    norm(displacement(a, b, dim))
}

#[inline]
pub fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn norm(a: Point) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TorusGrid {
    dim: usize,
    n: usize,
}

impl TorusGrid {
    /// Grid usable by every solver: `n >= 8` nodes per dimension.
    pub fn new(dim: usize, n: usize) -> Result<Self, GridError> {
        let grid = Self::coarse(dim, n)?;
        grid.require_solver_resolution()?;
        Ok(grid)
    }

    /// Grid without the solver resolution floor, for small hand-built examples and diagnostics.
    pub fn coarse(dim: usize, n: usize) -> Result<Self, GridError> {
        if dim == 0 || dim > MAX_DIM {
            return Err(GridError::Dimension(dim));
        }
        if n < 2 {
            return Err(GridError::TooCoarse { n, min: 2 });
        }
        Ok(Self { dim, n })
    }

    pub fn require_solver_resolution(&self) -> Result<(), GridError> {
        if self.n < MIN_SOLVER_NODES {
            return Err(GridError::TooCoarse { n: self.n, min: MIN_SOLVER_NODES });
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_per_dim(&self) -> usize {
        self.n
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Torus diameter `sqrt(dim) / 2`.
    pub fn diameter(&self) -> f64 {
        (self.dim as f64).sqrt() / 2.0
    }

    pub fn multi_index(&self, idx: usize) -> [usize; MAX_DIM] {
        match self.dim {
            1 => [idx, 0],
            _ => [idx % self.n, idx / self.n],
        }
    }

    pub fn flat_index(&self, mi: [usize; MAX_DIM]) -> usize {
        match self.dim {
            1 => mi[0],
            _ => mi[0] + self.n * mi[1],
        }
    }

    /// Flat index of the node at `mi + offset`, with periodic wrap-around.
    pub fn shifted(&self, idx: usize, offset: [isize; MAX_DIM]) -> usize {
        let mi = self.multi_index(idx);
        let n = self.n as isize;
        let mut out = [0usize; MAX_DIM];
        for d in 0..self.dim {
            out[d] = (mi[d] as isize + offset[d]).rem_euclid(n) as usize;
        }
        self.flat_index(out)
    }

    pub fn node(&self, idx: usize) -> Point {
        let mi = self.multi_index(idx);
        let h = self.spacing();
        let mut x = [0.0; MAX_DIM];
        for d in 0..self.dim {
            x[d] = mi[d] as f64 * h;
        }
        x
    }

    pub fn nodes(&self) -> impl Iterator<Item = Point> + '_ {
        (0..self.len()).map(move |i| self.node(i))
    }

    /// Node nearest to `x` (ties resolved toward the lower index).
    pub fn nearest_node(&self, x: Point) -> usize {
        let x = wrap_point(x, self.dim);
        let mut mi = [0usize; MAX_DIM];
        for d in 0..self.dim {
            let s = x[d] * self.n as f64;
            let r = (s - 0.5).ceil().max(0.0) as usize;
            mi[d] = r % self.n;
        }
        self.flat_index(mi)
    }
}

/// Real samples at every node of a torus grid. Values are always finite.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    grid: TorusGrid,
    values: Vec<f64>,
}

/// Periodic one-sided and centered differences, one `Point` per node (components past `dim` are 0).
#[derive(Clone, Debug)]
pub struct Differences {
    pub forward: Vec<Point>,
    pub backward: Vec<Point>,
    pub centered: Vec<Point>,
}

/// Pointwise comparison of two grid functions, computed on `f - g`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SupMetrics {
    pub sup_norm_diff: f64,
    pub min_diff: f64,
    pub max_diff: f64,
}

impl GridFunction {
    pub fn from_values(grid: TorusGrid, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.len() {
            return Err(GridError::Length { expected: grid.len(), got: values.len() });
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(GridError::NonFinite { index, value });
        }
        Ok(Self { grid, values })
    }

    /// Internal constructor for solver outputs that are finite by construction.
    pub(crate) fn from_values_unchecked(grid: TorusGrid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self { grid, values }
    }

    pub fn constant(grid: TorusGrid, value: f64) -> Self {
        assert!(value.is_finite(), "constant grid function must be finite");
        Self { grid, values: vec![value; grid.len()] }
    }

    pub fn from_fn(grid: TorusGrid, f: impl Fn(Point) -> f64) -> Result<Self, GridError> {
        let values = grid.nodes().map(f).collect();
        Self::from_values(grid, values)
    }

    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Adds a constant to every node.
    pub fn shifted(&self, k: f64) -> Self {
        Self::from_values_unchecked(self.grid, self.values.iter().map(|v| v + k).collect())
    }

    /// `rho * self + (1 - rho) * other`.
    pub fn blend(&self, other: &GridFunction, rho: f64) -> Result<Self, GridError> {
        self.same_grid(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| rho * a + (1.0 - rho) * b)
            .collect();
        Self::from_values(self.grid, values)
    }

    fn same_grid(&self, other: &GridFunction) -> Result<(), GridError> {
        if self.grid != other.grid {
            return Err(GridError::GridMismatch(self.grid, other.grid));
        }
        Ok(())
    }

    /// Periodic multilinear interpolation at an arbitrary point.
    pub fn interpolate(&self, x: Point) -> f64 {
        let n = self.grid.n;
        let mut base = [0usize; MAX_DIM];
        let mut theta = [0.0; MAX_DIM];
        for d in 0..self.grid.dim {
            let s = wrap_coord(x[d]) * n as f64;
            let i = s.floor();
            base[d] = (i as usize) % n;
            theta[d] = s - i;
        }
        match self.grid.dim {
            1 => {
                let a = self.values[base[0]];
                let b = self.values[(base[0] + 1) % n];
                (1.0 - theta[0]) * a + theta[0] * b
            }
            _ => {
                let i1 = (base[0] + 1) % n;
                let j1 = (base[1] + 1) % n;
                let v00 = self.values[base[0] + n * base[1]];
                let v10 = self.values[i1 + n * base[1]];
                let v01 = self.values[base[0] + n * j1];
                let v11 = self.values[i1 + n * j1];
                let (tx, ty) = (theta[0], theta[1]);
                (1.0 - ty) * ((1.0 - tx) * v00 + tx * v10) + ty * ((1.0 - tx) * v01 + tx * v11)
            }
        }
    }

    pub fn diff_ops(&self) -> Differences {
        let grid = self.grid;
        let inv_h = grid.n as f64;
        let len = grid.len();
        let mut forward = vec![[0.0; MAX_DIM]; len];
        let mut backward = vec![[0.0; MAX_DIM]; len];
        let mut centered = vec![[0.0; MAX_DIM]; len];
        for i in 0..len {
            let here = self.values[i];
            for d in 0..grid.dim {
                let mut off = [0isize; MAX_DIM];
                off[d] = 1;
                let next = self.values[grid.shifted(i, off)];
                off[d] = -1;
                let prev = self.values[grid.shifted(i, off)];
                forward[i][d] = (next - here) * inv_h;
                backward[i][d] = (here - prev) * inv_h;
                centered[i][d] = (next - prev) * 0.5 * inv_h;
            }
        }
        Differences { forward, backward, centered }
    }

    pub fn sup_metrics(&self, other: &GridFunction) -> Result<SupMetrics, GridError> {
        self.same_grid(other)?;
        let mut min_diff = f64::INFINITY;
        let mut max_diff = f64::NEG_INFINITY;
        for (a, b) in self.values.iter().zip(&other.values) {
            let d = a - b;
            min_diff = min_diff.min(d);
            max_diff = max_diff.max(d);
        }
        Ok(SupMetrics { sup_norm_diff: min_diff.abs().max(max_diff.abs()), min_diff, max_diff })
    }

    /// Writes `x[,y],value` rows with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        match self.grid.dim {
            1 => writeln!(out, "x,value")?,
            _ => writeln!(out, "x1,x2,value")?,
        }
        for (i, v) in self.values.iter().enumerate() {
            let x = self.grid.node(i);
            for d in 0..self.grid.dim {
                write!(out, "{},", crate::fmt_f64(x[d]))?;
            }
            writeln!(out, "{}", crate::fmt_f64(*v))?;
        }
        Ok(())
    }

    /// Reads the format produced by [`GridFunction::write_csv`]; the value is the last column.
    pub fn read_csv<R: BufRead>(grid: TorusGrid, input: R) -> Result<Self, GridError> {
        let mut values = Vec::with_capacity(grid.len());
        for (lineno, line) in input.lines().enumerate() {
            let line = line.map_err(|e| GridError::Csv(e.to_string()))?;
            let line = line.trim();
            if line.is_empty() || (lineno == 0 && line.starts_with('x')) {
                continue;
            }
            let last = line.rsplit(',').next().unwrap_or("");
            let v: f64 = last
                .trim()
                .parse()
                .map_err(|_| GridError::Csv(format!("line {}: bad value {last:?}", lineno + 1)))?;
            values.push(v);
        }
        Self::from_values(grid, values)
    }
}
