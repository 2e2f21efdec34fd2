//! Boxes, uniform grids and multilinear scalar fields.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract, Result};

/// Highest state dimension supported by grids.
pub const MAX_DIM: usize = 4;

/// Fractional cell coordinates this close to a node snap onto it, so that
/// node coordinates reproduce stored values exactly.
const NODE_SNAP: f64 = 1e-9;

/// An axis-aligned box `lower <= x <= upper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(config_err!(
                "box needs matching, non-empty bounds (got {} and {})",
                lower.len(),
                upper.len()
            ));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(config_err!("box dimension {i}: invalid interval [{lo}, {hi}]"));
            }
        }
        Ok(Self { lower, upper })
    }

    /// One-dimensional box `[lo, hi]`.
    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo], vec![hi])
    }

    /// Symmetric box `[-b, b]^dim`.
    pub fn symmetric(bound: f64, dim: usize) -> Result<Self> {
        Self::new(vec![-bound; dim], vec![bound; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    pub fn half_width(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (u - l)).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| *l <= *v && *v <= *u)
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for (v, (l, u)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(*l, *u);
        }
    }

    /// Enumerates `points` values per dimension (exactly one for a degenerate
    /// dimension), in lexicographic order with the first dimension slowest.
    pub fn discretize(&self, points: usize) -> Result<Discretization> {
        let mut axes: Vec<Vec<f64>> = Vec::with_capacity(self.dim());
        for (l, u) in self.lower.iter().zip(&self.upper) {
            if l == u {
                axes.push(vec![*l]);
                continue;
            }
            if points < 2 {
                return Err(config_err!(
                    "a non-degenerate box dimension needs at least 2 points, got {points}"
                ));
            }
            let h = (u - l) / (points - 1) as f64;
            let mut ax: Vec<f64> = (0..points).map(|k| l + k as f64 * h).collect();
            ax[points - 1] = *u;
            axes.push(ax);
        }
        Ok(Discretization::from_axes(&axes))
    }
}

/// A finite, ordered set of points in a box.
#[derive(Debug, Clone, PartialEq)]
pub struct Discretization {
    dim: usize,
    points: Vec<f64>,
    spacing: f64,
}

impl Discretization {
    fn from_axes(axes: &[Vec<f64>]) -> Self {
        let dim = axes.len();
        let count: usize = axes.iter().map(Vec::len).product();
        let mut points = Vec::with_capacity(count * dim);
        let mut idx = vec![0usize; dim];
        for _ in 0..count {
            for (k, ax) in axes.iter().enumerate() {
                points.push(ax[idx[k]]);
            }
            for k in (0..dim).rev() {
                idx[k] += 1;
                if idx[k] < axes[k].len() {
                    break;
                }
                idx[k] = 0;
            }
        }
        let spacing = axes
            .iter()
            .filter(|a| a.len() > 1)
            .map(|a| a[1] - a[0])
            .fold(f64::INFINITY, f64::min);
        Self { dim, points, spacing }
    }

    /// Builds a discretization from explicit points (`points.len()` must be a
    /// multiple of `dim`).
    pub fn from_points(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || !points.len().is_multiple_of(dim) {
            return Err(contract!("{} coordinates do not form {dim}-dimensional points", points.len()));
        }
        Ok(Self { dim, points, spacing: f64::INFINITY })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.points.chunks_exact(self.dim)
    }

    /// Smallest per-axis spacing (infinite for a single point).
    pub fn spacing(&self) -> f64 {
        self.spacing
    }
}

/// One grid axis: `count` uniformly spaced nodes from `min` to `max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Axis {
    pub fn spacing(&self) -> f64 {
        (self.max - self.min) / (self.count - 1) as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        if k + 1 == self.count {
            self.max
        } else {
            self.min + k as f64 * self.spacing()
        }
    }
}

/// Uniform rectangular grid. Nodes are stored row-major (last axis fastest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr", into = "GridRepr")]
pub struct Grid {
    axes: Vec<Axis>,
    strides: Vec<usize>,
    inv_spacing: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridRepr {
    axes: Vec<Axis>,
}

impl TryFrom<GridRepr> for Grid {
    type Error = crate::Error;
    fn try_from(r: GridRepr) -> Result<Self> {
        Grid::new(r.axes)
    }
}

impl From<Grid> for GridRepr {
    fn from(g: Grid) -> Self {
        GridRepr { axes: g.axes }
    }
}

impl Grid {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() || axes.len() > MAX_DIM {
            return Err(config_err!("grid dimension must be in 1..={MAX_DIM}, got {}", axes.len()));
        }
        for (i, a) in axes.iter().enumerate() {
            if !(a.min.is_finite() && a.max.is_finite()) || a.min >= a.max {
                return Err(config_err!("grid axis {i}: need min < max, got [{}, {}]", a.min, a.max));
            }
            if a.count < 2 || a.count > u16::MAX as usize {
                return Err(config_err!("grid axis {i}: node count {} outside 2..=65535", a.count));
            }
        }
        let mut strides = vec![1usize; axes.len()];
        for k in (0..axes.len() - 1).rev() {
            strides[k] = strides[k + 1] * axes[k + 1].count;
        }
        let inv_spacing = axes.iter().map(|a| 1.0 / a.spacing()).collect();
        Ok(Self { axes, strides, inv_spacing })
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn node_count(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    /// Volume of one grid cell.
    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(Axis::spacing).product()
    }

    pub fn hull(&self) -> Bounds {
        Bounds {
            lower: self.axes.iter().map(|a| a.min).collect(),
            upper: self.axes.iter().map(|a| a.max).collect(),
        }
    }

    /// Multi-index of a flat node index.
    pub fn node_index(&self, flat: usize, idx: &mut [usize]) {
        let mut rem = flat;
        for (k, s) in self.strides.iter().enumerate() {
            idx[k] = rem / s;
            rem %= s;
        }
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    /// Coordinates of node `flat` written to `x`.
    pub fn node_coords(&self, flat: usize, x: &mut [f64]) {
        let mut rem = flat;
        for (k, (s, a)) in self.strides.iter().zip(&self.axes).enumerate() {
            x[k] = a.node(rem / s);
            rem %= s;
        }
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        self.node_coords(flat, &mut x);
        x
    }

    pub fn nodes(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.node_count()).map(|i| self.node(i))
    }

    /// Lower cell index and fractional offset along axis `k`, clamped to the
    /// hull. Returns whether clamping happened.
    #[inline]
    fn locate(&self, k: usize, v: f64) -> (usize, f64, bool) {
        let a = &self.axes[k];
        let mut t = (v - a.min) * self.inv_spacing[k];
        let mut clamped = false;
        let top = (a.count - 1) as f64;
        if !(t >= 0.0) {
            t = 0.0;
            clamped = v < a.min || v.is_nan();
        } else if t > top {
            t = top;
            clamped = true;
        }
        let r = libm::round(t);
        if (t - r).abs() < NODE_SNAP {
            t = r;
        }
        let mut i = t as usize;
        if i >= a.count - 1 {
            i = a.count - 2;
        }
        (i, t - i as f64, clamped)
    }

    /// Number of grid cells (one per node) whose node value satisfies `pred`
    /// times the cell volume.
    pub fn area_where(&self, values: &[f64], pred: impl Fn(f64) -> bool) -> f64 {
        values.iter().filter(|v| pred(**v)).count() as f64 * self.cell_volume()
    }
}

/// Creation metadata carried with a scalar field.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FieldMeta {
    pub label: String,
    pub params: BTreeMap<String, String>,
}

/// Values sampled on every node of a [`Grid`], interpolated multilinearly.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
    pub meta: FieldMeta,
}

impl ScalarField {
    pub fn new(grid: Grid, values: Vec<f64>, meta: FieldMeta) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(contract!(
                "field has {} values but the grid has {} nodes",
                values.len(),
                grid.node_count()
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(contract!("field value at node {i} is not finite"));
        }
        Ok(Self { grid, values, meta })
    }

    pub fn constant(grid: Grid, c: f64) -> Result<Self> {
        let n = grid.node_count();
        Self::new(grid, vec![c; n], FieldMeta::default())
    }

    /// Samples `f` at every node.
    pub fn from_fn(grid: Grid, label: &str, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let mut x = vec![0.0; grid.dim()];
        let values = (0..grid.node_count())
            .map(|i| {
                grid.node_coords(i, &mut x);
                f(&x)
            })
            .collect();
        Self::new(grid, values, FieldMeta { label: label.into(), ..FieldMeta::default() })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Multilinear interpolation; `x` outside the hull is clamped onto it.
    pub fn interpolate(&self, x: &[f64]) -> Result<f64> {
        self.interpolate_clamped(x).map(|(v, _)| v)
    }

    /// Like [`interpolate`](Self::interpolate) but also reports whether the
    /// query had to be clamped to the hull.
    pub fn interpolate_clamped(&self, x: &[f64]) -> Result<(f64, bool)> {
        if x.len() != self.grid.dim() {
            return Err(contract!(
                "state of dimension {} queried on a {}-dimensional field",
                x.len(),
                self.grid.dim()
            ));
        }
        Ok(self.eval(x))
    }

    /// Unchecked interpolation. `x.len()` must equal the grid dimension.
    #[inline]
    pub fn eval(&self, x: &[f64]) -> (f64, bool) {
        let s = self.eval_stencil(x);
        (s.value, s.clamped)
    }

    /// Interpolated value plus the lower corner of the cell that was read.
    #[inline]
    pub(crate) fn eval_stencil(&self, x: &[f64]) -> Stencil {
        let g = &self.grid;
        if g.dim() == 2 {
            let (i0, f0, c0) = g.locate(0, x[0]);
            let (i1, f1, c1) = g.locate(1, x[1]);
            let s0 = g.strides[0];
            let base = i0 * s0 + i1;
            let v = &self.values;
            let a = v[base] + f1 * (v[base + 1] - v[base]);
            let b = v[base + s0] + f1 * (v[base + s0 + 1] - v[base + s0]);
            let value = a + f0 * (b - a);
            let mut corner = [0u16; MAX_DIM];
            corner[0] = i0 as u16;
            corner[1] = i1 as u16;
            return Stencil { value, clamped: c0 || c1, corner };
        }
        let n = g.dim();
        let mut base = [0usize; MAX_DIM];
        let mut frac = [0.0f64; MAX_DIM];
        let mut clamped = false;
        let mut corner = [0u16; MAX_DIM];
        for k in 0..n {
            let (i, f, c) = g.locate(k, x[k]);
            base[k] = i;
            frac[k] = f;
            corner[k] = i as u16;
            clamped |= c;
        }
        let origin: usize = (0..n).map(|k| base[k] * g.strides[k]).sum();
        // Successive linear reductions over the 2^n corners, last axis first.
        let mut buf = [0.0f64; 1 << MAX_DIM];
        for (c, slot) in buf.iter_mut().enumerate().take(1 << n) {
            let mut off = origin;
            for k in 0..n {
                if c >> (n - 1 - k) & 1 == 1 {
                    off += g.strides[k];
                }
            }
            *slot = self.values[off];
        }
        let mut len = 1 << n;
        for k in (0..n).rev() {
            len /= 2;
            for c in 0..len {
                let lo = buf[2 * c];
                let hi = buf[2 * c + 1];
                buf[c] = lo + frac[k] * (hi - lo);
            }
        }
        Stencil { value: buf[0], clamped, corner }
    }

    /// `mask[i] = values[i] >= level`.
    pub fn superlevel_mask(&self, level: f64) -> Vec<bool> {
        self.values.iter().map(|v| *v >= level).collect()
    }
}

pub(crate) struct Stencil {
    pub value: f64,
    pub clamped: bool,
    pub corner: [u16; MAX_DIM],
}

/// Anything that assigns a scalar safety value to a state.
pub trait ValueFunction {
    fn value(&self, x: &[f64]) -> f64;
}

impl ValueFunction for ScalarField {
    fn value(&self, x: &[f64]) -> f64 {
        self.eval(x).0
    }
}

impl<T: ValueFunction + ?Sized> ValueFunction for &T {
    fn value(&self, x: &[f64]) -> f64 {
        (**self).value(x)
    }
}
