//! Rectangular grids and grid-sampled scalar fields.
//!
//! Values are stored row-major (last axis fastest). Fields are evaluated off
//! the nodes by multilinear interpolation. Outside the grid box a field is
//! extended pessimistically: the value at the clamped point minus the
//! Euclidean distance to the box, so the exterior reads as increasingly unsafe.
//!
//! A periodic axis keeps both endpoints as nodes (`lower` and `upper` describe
//! the same physical coordinate); coordinates are wrapped into the period
//! before interpolation.

mod io;
mod sets;

pub use io::{load_grid, read_grid, save_grid, write_grid, FORMAT_VERSION, MAGIC};
pub use sets::{switching_sets, ImplicitSet, SwitchingSets};

use crate::error::{Error, Result};

/// Largest supported grid dimension.
pub const MAX_DIM: usize = 6;

/// Relative distance to a node below which a coordinate snaps onto it.
const NODE_SNAP: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Axis {
    pub count: usize,
    pub lower: f64,
    pub upper: f64,
    #[serde(default)]
    pub periodic: bool,
}

impl Axis {
    pub fn new(count: usize, lower: f64, upper: f64) -> Self {
        Self {
            count,
            lower,
            upper,
            periodic: false,
        }
    }

    pub fn periodic(count: usize, lower: f64, upper: f64) -> Self {
        Self {
            periodic: true,
            ..Self::new(count, lower, upper)
        }
    }

    pub fn spacing(&self) -> f64 {
        (self.upper - self.lower) / (self.count - 1) as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        if k + 1 == self.count {
            self.upper
        } else {
            self.lower + k as f64 * self.spacing()
        }
    }

    fn wrap(&self, x: f64) -> f64 {
        let period = self.upper - self.lower;
        self.lower + (x - self.lower).rem_euclid(period)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    axes: Vec<Axis>,
    strides: Vec<usize>,
    len: usize,
}

impl Grid {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() || axes.len() > MAX_DIM {
            return Err(Error::InvalidGrid(format!(
                "dimension {} outside 1..={MAX_DIM}",
                axes.len()
            )));
        }
        for (k, a) in axes.iter().enumerate() {
            if a.count < 3 {
                return Err(Error::InvalidGrid(format!(
                    "axis {k} has {} nodes, need at least 3",
                    a.count
                )));
            }
            if !(a.lower.is_finite() && a.upper.is_finite() && a.lower < a.upper) {
                return Err(Error::InvalidGrid(format!(
                    "axis {k} bounds [{}, {}] are not an increasing finite interval",
                    a.lower, a.upper
                )));
            }
        }
        let mut strides = vec![1; axes.len()];
        for k in (0..axes.len() - 1).rev() {
            strides[k] = strides[k + 1] * axes[k + 1].count;
        }
        let len = strides[0] * axes[0].count;
        Ok(Self { axes, strides, len })
    }

    pub fn ndim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn spacing(&self) -> Vec<f64> {
        self.axes.iter().map(Axis::spacing).collect()
    }

    /// Length of one cell's diagonal.
    pub fn cell_diagonal(&self) -> f64 {
        self.axes
            .iter()
            .map(|a| a.spacing().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Marks axis `k` as periodic. Grid files do not carry this flag, so
    /// callers re-apply it after loading.
    pub fn with_periodic(mut self, k: usize) -> Self {
        self.axes[k].periodic = true;
        self
    }

    pub fn multi_index(&self, mut flat: usize, out: &mut [usize]) {
        for (k, s) in self.strides.iter().enumerate() {
            out[k] = flat / s;
            flat %= s;
        }
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn node(&self, flat: usize, out: &mut [f64]) {
        let mut rem = flat;
        for (k, s) in self.strides.iter().enumerate() {
            out[k] = self.axes[k].node(rem / s);
            rem %= s;
        }
    }

    pub fn node_vec(&self, flat: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.ndim()];
        self.node(flat, &mut x);
        x
    }

    /// True when the node lies on the outer boundary of a non-periodic axis.
    pub fn is_boundary_node(&self, flat: usize) -> bool {
        let mut rem = flat;
        for (k, s) in self.strides.iter().enumerate() {
            let i = rem / s;
            rem %= s;
            let a = &self.axes[k];
            if !a.periodic && (i == 0 || i + 1 == a.count) {
                return true;
            }
        }
        false
    }

    /// Whether the box of this grid contains `bounds` (a mode domain, say).
    pub fn covers(&self, lower: &[f64], upper: &[f64]) -> bool {
        self.axes
            .iter()
            .zip(lower.iter().zip(upper))
            .all(|(a, (l, u))| a.periodic || (a.lower <= *l && *u <= a.upper))
    }

    /// Interpolation stencil at `x`: lower-corner flat index, per-axis
    /// fractional offsets and the distance from `x` to the grid box.
    fn locate(&self, x: &[f64], frac: &mut [f64; MAX_DIM], corner: &mut [usize; MAX_DIM]) -> f64 {
        let mut dist2 = 0.0;
        for (k, a) in self.axes.iter().enumerate() {
            let h = a.spacing();
            let xc = if a.periodic {
                a.wrap(x[k])
            } else {
                let c = x[k].clamp(a.lower, a.upper);
                dist2 += (x[k] - c) * (x[k] - c);
                c
            };
            let mut s = (xc - a.lower) / h;
            let r = s.round();
            if (s - r).abs() < NODE_SNAP {
                s = r;
            }
            let last = (a.count - 2) as f64;
            let i = s.floor().clamp(0.0, last);
            corner[k] = i as usize;
            frac[k] = (s - i).clamp(0.0, 1.0);
        }
        dist2.sqrt()
    }
}

/// A scalar field sampled on a [`Grid`].
#[derive(Clone, Debug, PartialEq)]
pub struct GridFn {
    grid: Grid,
    values: Vec<f64>,
}

impl GridFn {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} values for a grid of {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSample {
                node: grid.node_vec(k),
                value: values[k],
            });
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        let values = vec![value; grid.len()];
        Self { grid, values }
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

    /// Multilinear interpolation with the clamp-minus-distance exterior.
    pub fn interpolate(&self, x: &[f64]) -> f64 {
        interpolate_values(&self.grid, &self.values, x)
    }

    /// Central differences of the interpolated field with one grid spacing per
    /// axis; one-sided where the stencil would leave a non-periodic axis.
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.ndim()];
        self.gradient_into(x, &mut out);
        out
    }

    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        let mut probe = [0.0f64; MAX_DIM];
        let n = self.grid.ndim();
        probe[..n].copy_from_slice(&x[..n]);
        let mut center = None;
        for (k, a) in self.grid.axes.iter().enumerate() {
            let h = a.spacing();
            let fwd_ok = a.periodic || x[k] + h <= a.upper;
            let bwd_ok = a.periodic || x[k] - h >= a.lower;
            let mut eval = |dx: f64| {
                probe[k] = x[k] + dx;
                let v = self.interpolate(&probe[..n]);
                probe[k] = x[k];
                v
            };
            out[k] = match (fwd_ok, bwd_ok) {
                (true, true) | (false, false) => (eval(h) - eval(-h)) / (2.0 * h),
                (true, false) => {
                    let c = *center.get_or_insert_with(|| self.interpolate(x));
                    (eval(h) - c) / h
                }
                (false, true) => {
                    let c = *center.get_or_insert_with(|| self.interpolate(x));
                    (c - eval(-h)) / h
                }
            };
        }
    }

    fn zip_with(&self, other: &GridFn, op: impl Fn(f64, f64) -> f64) -> Result<GridFn> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch(
                "set operation on fields with different grids".into(),
            ));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| op(*a, *b))
            .collect();
        Ok(GridFn {
            grid: self.grid.clone(),
            values,
        })
    }

    /// Pointwise minimum: intersection of the two superlevel sets.
    pub fn min(&self, other: &GridFn) -> Result<GridFn> {
        self.zip_with(other, f64::min)
    }

    /// Pointwise maximum: union of the two superlevel sets.
    pub fn max(&self, other: &GridFn) -> Result<GridFn> {
        self.zip_with(other, f64::max)
    }

    /// Pointwise negation: complement of the superlevel set (boundary kept in both).
    pub fn negate(&self) -> GridFn {
        GridFn {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| -v).collect(),
        }
    }

    pub fn count_nonnegative(&self) -> usize {
        self.values.iter().filter(|v| **v >= 0.0).count()
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Interpolation on a raw value slice laid out for `grid`. Used by the value
/// iteration, which swaps buffers instead of rebuilding [`GridFn`]s.
pub(crate) fn interpolate_values(grid: &Grid, values: &[f64], x: &[f64]) -> f64 {
    let mut frac = [0.0f64; MAX_DIM];
    let mut corner = [0usize; MAX_DIM];
    let dist = grid.locate(x, &mut frac, &mut corner);
    let n = grid.ndim();
    let base: usize = (0..n).map(|k| corner[k] * grid.strides[k]).sum();
    let mut acc = 0.0;
    for mask in 0..(1usize << n) {
        let mut w = 1.0;
        let mut offset = 0;
        for k in 0..n {
            if mask & (1 << (n - 1 - k)) != 0 {
                w *= frac[k];
                offset += grid.strides[k];
            } else {
                w *= 1.0 - frac[k];
            }
        }
        if w != 0.0 {
            acc += w * values[base + offset];
        }
    }
    acc - dist
}

/// Samples `level` at every node.
pub fn sample_to_grid(level: &dyn Fn(&[f64]) -> f64, grid: &Grid) -> Result<GridFn> {
    let mut x = vec![0.0; grid.ndim()];
    let mut values = Vec::with_capacity(grid.len());
    for k in 0..grid.len() {
        grid.node(k, &mut x);
        let v = level(&x);
        if !v.is_finite() {
            return Err(Error::NonFiniteSample {
                node: x.clone(),
                value: v,
            });
        }
        values.push(v);
    }
    Ok(GridFn {
        grid: grid.clone(),
        values,
    })
}
