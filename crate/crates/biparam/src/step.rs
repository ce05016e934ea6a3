//! Piecewise-constant functions on the finest lattice cells.
//!
//! A `StepFunction` stores dense cell values over one parameter or over
//! the product of both, row-major with the axis-1 cell index major. All
//! averages, inner products and `L^p` norms are exact finite sums.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::lattice::{DyadicCube, LatticeParams, ProductGrid, ShiftedGrid, MAX_DIM};

/// Which parameters a function lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisSet {
    One,
    Two,
    Both,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepFunction {
    pub params: LatticeParams,
    pub axes: AxisSet,
    pub values: Vec<f64>,
}

/// Row-major index helpers for the cells of one parameter.
pub fn cell_index(params: &LatticeParams, axis: u8, units: &[i64]) -> usize {
    let per = params.units_per_dim();
    let n = params.dim(axis) as usize;
    let mut idx = 0usize;
    for d in 0..n {
        let u = if params.periodic {
            units[d].rem_euclid(per)
        } else {
            units[d]
        };
        debug_assert!((0..per).contains(&u));
        idx = idx * per as usize + u as usize;
    }
    idx
}

/// Unit coordinates of cell `idx` of one parameter (row-major inverse).
pub fn cell_units(params: &LatticeParams, axis: u8, idx: usize) -> [i64; MAX_DIM] {
    let per = params.units_per_dim() as usize;
    let n = params.dim(axis) as usize;
    let mut units = [0i64; MAX_DIM];
    let mut rest = idx;
    for d in (0..n).rev() {
        units[d] = (rest % per) as i64;
        rest /= per;
    }
    units
}

/// Physical center coordinates of cell `idx` of one parameter.
pub fn cell_center(params: &LatticeParams, axis: u8, idx: usize) -> [f64; MAX_DIM] {
    let units = cell_units(params, axis, idx);
    let mut c = [0.0f64; MAX_DIM];
    for d in 0..params.dim(axis) as usize {
        c[d] = params.unit_to_phys(units[d]) + 0.5 * params.cell_side();
    }
    c
}

/// Cell indices covered by a cube of a shifted grid, in increasing order.
pub fn cube_cells(grid: &ShiftedGrid, cube: &DyadicCube) -> Vec<usize> {
    let p = &grid.params;
    let n = grid.dim() as usize;
    let side = grid.side_units(cube);
    let per = p.units_per_dim();
    let mut lefts = [0i64; MAX_DIM];
    for d in 0..n {
        lefts[d] = grid.left_units(cube, d);
    }
    let mut out = Vec::new();
    let mut offs = [0i64; MAX_DIM];
    'outer: loop {
        let mut units = [0i64; MAX_DIM];
        let mut inside = true;
        for d in 0..n {
            let u = lefts[d] + offs[d];
            if p.periodic {
                units[d] = u.rem_euclid(per);
            } else {
                if u < 0 || u >= per {
                    inside = false;
                }
                units[d] = u;
            }
        }
        if inside {
            out.push(cell_index(p, cube.axis, &units));
        }
        let mut d = 0;
        loop {
            if d == n {
                break 'outer;
            }
            offs[d] += 1;
            if offs[d] < side {
                break;
            }
            offs[d] = 0;
            d += 1;
        }
    }
    out.sort_unstable();
    out
}

impl StepFunction {
    pub fn zero(params: &LatticeParams, axes: AxisSet) -> Self {
        let len = match axes {
            AxisSet::One => params.cells(1),
            AxisSet::Two => params.cells(2),
            AxisSet::Both => params.cells(1) * params.cells(2),
        };
        StepFunction {
            params: *params,
            axes,
            values: vec![0.0; len],
        }
    }

    pub fn constant(params: &LatticeParams, axes: AxisSet, c: f64) -> Self {
        let mut f = Self::zero(params, axes);
        f.values.iter_mut().for_each(|v| *v = c);
        f
    }

    /// Indicator of a single-parameter cube.
    pub fn indicator(grid: &ShiftedGrid, cube: &DyadicCube) -> Self {
        let axes = if grid.axis == 1 { AxisSet::One } else { AxisSet::Two };
        let mut f = Self::zero(&grid.params, axes);
        for c in cube_cells(grid, cube) {
            f.values[c] = 1.0;
        }
        f
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Cell volume of the underlying measure.
    pub fn cell_volume(&self) -> f64 {
        match self.axes {
            AxisSet::One => self.params.cell_vol(1),
            AxisSet::Two => self.params.cell_vol(2),
            AxisSet::Both => self.params.cell_vol(1) * self.params.cell_vol(2),
        }
    }

    pub fn check_compatible(&self, other: &StepFunction) -> Result<()> {
        if self.params != other.params || self.axes != other.axes {
            return Err(Error::Domain("step functions on different lattices".to_string()));
        }
        Ok(())
    }

    pub fn add(&self, other: &StepFunction) -> Result<StepFunction> {
        self.check_compatible(other)?;
        let mut out = self.clone();
        for (v, w) in out.values.iter_mut().zip(&other.values) {
            *v += w;
        }
        Ok(out)
    }

    pub fn sub(&self, other: &StepFunction) -> Result<StepFunction> {
        self.check_compatible(other)?;
        let mut out = self.clone();
        for (v, w) in out.values.iter_mut().zip(&other.values) {
            *v -= w;
        }
        Ok(out)
    }

    pub fn scale(&self, c: f64) -> StepFunction {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= c);
        out
    }

    pub fn mul(&self, other: &StepFunction) -> Result<StepFunction> {
        self.check_compatible(other)?;
        let mut out = self.clone();
        for (v, w) in out.values.iter_mut().zip(&other.values) {
            *v *= w;
        }
        Ok(out)
    }

    /// Integral over the whole domain.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_volume()
    }

    /// `L^2` inner product.
    pub fn inner(&self, other: &StepFunction) -> Result<f64> {
        self.check_compatible(other)?;
        let s: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum();
        Ok(s * self.cell_volume())
    }

    /// `L^p` norm (`p > 0`); `p = infinity` callers use `sup_norm`.
    pub fn lp_norm(&self, p: f64) -> f64 {
        let s: f64 = self
            .values
            .iter()
            .map(|v| fmath::powf(fmath::abs(*v), p))
            .sum();
        fmath::powf(s * self.cell_volume(), 1.0 / p)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(fmath::abs(*v)))
    }

    pub fn l2_norm(&self) -> f64 {
        fmath::sqrt(self.inner(self).unwrap())
    }

    /// Tensor product of an axis-1 and an axis-2 function.
    pub fn tensor(f1: &StepFunction, f2: &StepFunction) -> Result<StepFunction> {
        if f1.axes != AxisSet::One || f2.axes != AxisSet::Two || f1.params != f2.params {
            return Err(Error::Domain("tensor needs axis-1 and axis-2 factors".to_string()));
        }
        let c2 = f2.len();
        let mut out = StepFunction::zero(&f1.params, AxisSet::Both);
        for (i1, a) in f1.values.iter().enumerate() {
            for (i2, b) in f2.values.iter().enumerate() {
                out.values[i1 * c2 + i2] = a * b;
            }
        }
        Ok(out)
    }

    /// Average over a single-parameter cube (function on that axis only).
    pub fn average_on(&self, grid: &ShiftedGrid, cube: &DyadicCube) -> Result<f64> {
        let want = if grid.axis == 1 { AxisSet::One } else { AxisSet::Two };
        if self.axes != want {
            return Err(Error::Domain("average_on needs a single-axis function".to_string()));
        }
        let cells = cube_cells(grid, cube);
        if cells.is_empty() {
            return Err(Error::Domain("cube has no cells in the domain".to_string()));
        }
        let s: f64 = cells.iter().map(|&c| self.values[c]).sum();
        Ok(s / cells.len() as f64)
    }

    /// Average over a product rectangle for a bi-parameter function.
    pub fn average_on_rect(
        &self,
        grids: &ProductGrid,
        r1: &DyadicCube,
        r2: &DyadicCube,
    ) -> Result<f64> {
        if self.axes != AxisSet::Both {
            return Err(Error::Domain("average_on_rect needs a bi-parameter function".to_string()));
        }
        let cells1 = cube_cells(&grids.grid1, r1);
        let cells2 = cube_cells(&grids.grid2, r2);
        if cells1.is_empty() || cells2.is_empty() {
            return Err(Error::Domain("rectangle has no cells in the domain".to_string()));
        }
        let c2 = self.params.cells(2);
        let mut s = 0.0;
        for &a in &cells1 {
            for &b in &cells2 {
                s += self.values[a * c2 + b];
            }
        }
        Ok(s / (cells1.len() * cells2.len()) as f64)
    }

    /// Axis-1 slice of a bi-parameter function at axis-2 cell `i2`.
    pub fn slice_axis1(&self, i2: usize) -> StepFunction {
        debug_assert_eq!(self.axes, AxisSet::Both);
        let c2 = self.params.cells(2);
        let c1 = self.params.cells(1);
        let mut out = StepFunction::zero(&self.params, AxisSet::One);
        for i1 in 0..c1 {
            out.values[i1] = self.values[i1 * c2 + i2];
        }
        out
    }

    /// Axis-2 slice of a bi-parameter function at axis-1 cell `i1`.
    pub fn slice_axis2(&self, i1: usize) -> StepFunction {
        debug_assert_eq!(self.axes, AxisSet::Both);
        let c2 = self.params.cells(2);
        let mut out = StepFunction::zero(&self.params, AxisSet::Two);
        out.values.copy_from_slice(&self.values[i1 * c2..(i1 + 1) * c2]);
        out
    }

    /// Mean along the named axis, returning a bi-parameter function
    /// constant in that axis.
    pub fn axis_mean(&self, axis: u8) -> StepFunction {
        debug_assert_eq!(self.axes, AxisSet::Both);
        let c1 = self.params.cells(1);
        let c2 = self.params.cells(2);
        let mut out = StepFunction::zero(&self.params, AxisSet::Both);
        if axis == 1 {
            for i2 in 0..c2 {
                let mut s = 0.0;
                for i1 in 0..c1 {
                    s += self.values[i1 * c2 + i2];
                }
                let m = s / c1 as f64;
                for i1 in 0..c1 {
                    out.values[i1 * c2 + i2] = m;
                }
            }
        } else {
            for i1 in 0..c1 {
                let mut s = 0.0;
                for i2 in 0..c2 {
                    s += self.values[i1 * c2 + i2];
                }
                let m = s / c2 as f64;
                for i2 in 0..c2 {
                    out.values[i1 * c2 + i2] = m;
                }
            }
        }
        out
    }

    /// Subtract the per-axis means: the result has zero mean along every
    /// axis-1 and axis-2 slice direction.
    pub fn mean_adjusted(&self) -> StepFunction {
        let m1 = self.axis_mean(1);
        let m2 = self.axis_mean(2);
        let m12 = m1.axis_mean(2);
        let mut out = self.clone();
        for i in 0..out.values.len() {
            out.values[i] -= m1.values[i] + m2.values[i] - m12.values[i];
        }
        out
    }
}
