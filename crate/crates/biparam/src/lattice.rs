//! Finite dyadic lattices, random shifted grids, goodness, truncations
//! `D(N)`, and common-ancestor / triple classification.
//!
//! The domain per parameter is `[-2^M, 2^M)^n` with finest cells of side
//! `2^-L`; in periodic mode it is the torus of period `2^{M+1}`. All cube
//! geometry is kept in integer units of the finest cell, so distances and
//! volumes are exact dyadic rationals.
//!
//! A shifted grid carries one binary shift component per scale strictly
//! below the top cube. The position of a cube of side `2^k` depends only
//! on the components at strictly finer scales, while its goodness depends
//! only on the components at its own scale and coarser. That split is what
//! makes goodness independent of the expansion terms in the representation
//! engine.

use alloc::string::ToString;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::fmath;
use crate::rng::SeededRng;
use crate::Rational;

pub const MAX_DIM: usize = 3;

/// Global lattice configuration shared by both parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeParams {
    /// Dimension of the first parameter (1..=3).
    pub n1: u32,
    /// Dimension of the second parameter (1..=3).
    pub n2: u32,
    /// Half-log of the domain size: domain is `[-2^M, 2^M)^n`.
    pub m_exp: i32,
    /// Finest-scale exponent: cells have side `2^-L`.
    pub l_exp: i32,
    /// Torus mode: shifts wrap, the top cube has no boundary.
    pub periodic: bool,
    /// Goodness gap: only cubes `J` with `l(J) >= 2^r l(I)` constrain `I`.
    pub r: u32,
    /// Hoelder exponents of the kernel class, one per parameter.
    pub delta1: f64,
    pub delta2: f64,
    /// Goodness exponents in `(0, 1/2)`.
    pub gamma1: f64,
    pub gamma2: f64,
    /// Auxiliary summation exponent in `(0, 1)` for tail-summed decay factors.
    pub theta: f64,
}

/// Default goodness exponent `delta / (2(2n + delta))`.
pub fn default_gamma(n: u32, delta: f64) -> f64 {
    delta / (2.0 * (2.0 * n as f64 + delta))
}

impl LatticeParams {
    pub fn new(n1: u32, n2: u32, m_exp: i32, l_exp: i32, periodic: bool, r: u32) -> Result<Self> {
        let p = LatticeParams {
            n1,
            n2,
            m_exp,
            l_exp,
            periodic,
            r,
            delta1: 1.0,
            delta2: 1.0,
            gamma1: default_gamma(n1, 1.0),
            gamma2: default_gamma(n2, 1.0),
            theta: 0.5,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_exponents(mut self, delta1: f64, delta2: f64, theta: f64) -> Result<Self> {
        self.delta1 = delta1;
        self.delta2 = delta2;
        self.gamma1 = default_gamma(self.n1, delta1);
        self.gamma2 = default_gamma(self.n2, delta2);
        self.theta = theta;
        self.validate()?;
        Ok(self)
    }

    pub fn with_gamma(mut self, gamma1: f64, gamma2: f64) -> Result<Self> {
        self.gamma1 = gamma1;
        self.gamma2 = gamma2;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n1 == 0 || self.n1 > MAX_DIM as u32 || self.n2 == 0 || self.n2 > MAX_DIM as u32 {
            return Err(Error::Config("dimensions must be in 1..=3".to_string()));
        }
        if self.m_exp < 1 || self.l_exp < 1 {
            return Err(Error::Config("need M >= 1 and L >= 1".to_string()));
        }
        if self.m_exp + self.l_exp + 1 < 3 {
            return Err(Error::Config("need at least 3 scales".to_string()));
        }
        if self.m_exp + self.l_exp + 1 > 24 {
            return Err(Error::Config("lattice too deep (M+L+1 > 24)".to_string()));
        }
        if self.r == 0 {
            return Err(Error::Config("goodness gap r must be positive".to_string()));
        }
        for (d, g) in [(self.delta1, self.gamma1), (self.delta2, self.gamma2)] {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::Config("delta must lie in (0, 1]".to_string()));
            }
            if !(g > 0.0 && g < 0.5) {
                return Err(Error::Config("gamma must lie in (0, 1/2)".to_string()));
            }
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::Config("theta must lie in (0, 1)".to_string()));
        }
        Ok(())
    }

    /// Dimension of parameter `axis` (1 or 2).
    pub fn dim(&self, axis: u8) -> u32 {
        if axis == 1 {
            self.n1
        } else {
            self.n2
        }
    }

    pub fn delta(&self, axis: u8) -> f64 {
        if axis == 1 {
            self.delta1
        } else {
            self.delta2
        }
    }

    pub fn gamma(&self, axis: u8) -> f64 {
        if axis == 1 {
            self.gamma1
        } else {
            self.gamma2
        }
    }

    /// Top-cube side exponent: the whole domain has side `2^{M+1}`.
    pub fn top_exp(&self) -> i32 {
        self.m_exp + 1
    }

    /// Finest cell side exponent `-L`.
    pub fn finest_exp(&self) -> i32 {
        -self.l_exp
    }

    /// Domain extent per dimension in cell units: `2^{M+1+L}`.
    pub fn units_per_dim(&self) -> i64 {
        1i64 << (self.m_exp + 1 + self.l_exp)
    }

    /// Cells per dimension at scale exponent `k`.
    pub fn cubes_per_dim(&self, k: i32) -> i64 {
        debug_assert!(k >= self.finest_exp() && k <= self.top_exp());
        1i64 << (self.top_exp() - k)
    }

    /// Number of cubes of parameter `axis` at scale exponent `k`.
    pub fn cubes_at_scale(&self, axis: u8, k: i32) -> u64 {
        let per = self.cubes_per_dim(k) as u64;
        per.pow(self.dim(axis))
    }

    /// Total cell count of parameter `axis`.
    pub fn cells(&self, axis: u8) -> usize {
        (self.units_per_dim() as usize).pow(self.dim(axis))
    }

    /// Physical side of the finest cell.
    pub fn cell_side(&self) -> f64 {
        fmath::exp2i(self.finest_exp())
    }

    /// Physical cell volume of parameter `axis`.
    pub fn cell_vol(&self, axis: u8) -> f64 {
        fmath::exp2i(self.finest_exp() * self.dim(axis) as i32)
    }

    /// All scale exponents, finest first.
    pub fn scale_exps(&self) -> impl Iterator<Item = i32> {
        self.finest_exp()..=self.top_exp()
    }

    /// Number of shift components per dimension: scales strictly below top.
    pub fn shift_components(&self) -> usize {
        (self.m_exp + self.l_exp + 1) as usize
    }

    /// Physical coordinate of a cell-unit offset (left edge).
    pub fn unit_to_phys(&self, u: i64) -> f64 {
        (u - self.units_per_dim() / 2) as f64 * self.cell_side()
    }
}

/// A dyadic cube of one parameter: scale exponent plus position index.
///
/// The position is the index of the cube at its scale in the owning
/// shifted grid; the physical location additionally depends on the grid's
/// shift sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DyadicCube {
    pub axis: u8,
    pub scale_exp: i32,
    pub pos: [u32; MAX_DIM],
}

impl DyadicCube {
    pub fn new(axis: u8, scale_exp: i32, pos: [u32; MAX_DIM]) -> Self {
        DyadicCube {
            axis,
            scale_exp,
            pos,
        }
    }

    /// Physical side length `2^k`.
    pub fn side(&self) -> f64 {
        fmath::exp2i(self.scale_exp)
    }

    /// Physical volume in its parameter's dimension.
    pub fn volume(&self, params: &LatticeParams) -> f64 {
        fmath::exp2i(self.scale_exp * params.dim(self.axis) as i32)
    }
}

impl fmt::Display for DyadicCube {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "axis{}:2^{}@{:?}",
            self.axis,
            self.scale_exp,
            &self.pos[..]
        )
    }
}

/// A finite random dyadic grid on one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedGrid {
    pub params: LatticeParams,
    pub axis: u8,
    /// One component per scale strictly below the top cube, finest first;
    /// bit `d` of `omega[i]` is the shift of dimension `d` at scale
    /// `2^{-L+i}`.
    pub omega: Vec<u8>,
}

impl ShiftedGrid {
    /// Identifier packing the shift bits; equal ids mean equal grids.
    pub fn grid_id(&self) -> u64 {
        let mut id: u64 = self.axis as u64;
        for &c in &self.omega {
            id = (id << 3) | (c as u64 & 0x7);
        }
        id
    }

    pub fn dim(&self) -> u32 {
        self.params.dim(self.axis)
    }

    /// Accumulated shift in cell units affecting cubes at scale exponent
    /// `k`, per dimension: sum of `2^{t+L} * bit(t, d)` over `t < k`.
    pub fn shift_units(&self, k: i32, dim: usize) -> i64 {
        let mut s = 0i64;
        for (i, &c) in self.omega.iter().enumerate() {
            let t = self.params.finest_exp() + i as i32;
            if t >= k {
                break;
            }
            if (c >> dim) & 1 == 1 {
                s += 1i64 << (t + self.params.l_exp);
            }
        }
        s
    }

    /// Left edge of `cube` in cell units per dimension. In periodic mode
    /// the value is reduced mod the domain extent.
    pub fn left_units(&self, cube: &DyadicCube, dim: usize) -> i64 {
        let side_units = 1i64 << (cube.scale_exp + self.params.l_exp);
        let raw = cube.pos[dim] as i64 * side_units + self.shift_units(cube.scale_exp, dim);
        if self.params.periodic {
            raw.rem_euclid(self.params.units_per_dim())
        } else {
            raw
        }
    }

    /// Cube side length in cell units.
    pub fn side_units(&self, cube: &DyadicCube) -> i64 {
        1i64 << (cube.scale_exp + self.params.l_exp)
    }

    pub fn contains_cube(&self, cube: &DyadicCube) -> bool {
        if cube.axis != self.axis {
            return false;
        }
        let k = cube.scale_exp;
        if k < self.params.finest_exp() || k > self.params.top_exp() {
            return false;
        }
        let per = self.params.cubes_per_dim(k) as u32;
        (0..self.dim() as usize).all(|d| cube.pos[d] < per)
            && (self.dim() as usize..MAX_DIM).all(|d| cube.pos[d] == 0)
    }

    /// All cubes at scale exponent `k`.
    pub fn cubes_at(&self, k: i32) -> Vec<DyadicCube> {
        let per = self.params.cubes_per_dim(k) as u32;
        let n = self.dim() as usize;
        let mut out = Vec::with_capacity((per as usize).pow(n as u32));
        let mut pos = [0u32; MAX_DIM];
        loop {
            out.push(DyadicCube::new(self.axis, k, pos));
            // odometer over the first n coordinates
            let mut d = 0;
            loop {
                if d == n {
                    return out;
                }
                pos[d] += 1;
                if pos[d] < per {
                    break;
                }
                pos[d] = 0;
                d += 1;
            }
        }
    }

    /// All cubes of the grid, finest scale first.
    pub fn all_cubes(&self) -> Vec<DyadicCube> {
        let mut out = Vec::new();
        for k in self.params.scale_exps() {
            out.extend(self.cubes_at(k));
        }
        out
    }

    /// The child of `cube` whose low corner offset is `child_bits` in
    /// `{0,1}^n` (bit per dimension).
    ///
    /// The shift component at the child's scale enters the index: the
    /// child with low corner at the parent's low corner has index
    /// `2 pos + omega_bit`, not `2 pos`.
    pub fn child(&self, cube: &DyadicCube, child_bits: u32) -> Result<DyadicCube> {
        if cube.scale_exp <= self.params.finest_exp() {
            return Err(Error::Domain("cube has no children at finest scale".to_string()));
        }
        let kc = cube.scale_exp - 1;
        let comp_idx = (kc + self.params.l_exp) as usize;
        let comp = self.omega[comp_idx];
        let per = self.params.cubes_per_dim(kc) as i64;
        let mut pos = [0u32; MAX_DIM];
        for d in 0..self.dim() as usize {
            let raw = cube.pos[d] as i64 * 2 + ((child_bits >> d) & 1) as i64 + ((comp >> d) & 1) as i64;
            pos[d] = if self.params.periodic {
                raw.rem_euclid(per) as u32
            } else {
                raw as u32
            };
        }
        Ok(DyadicCube::new(self.axis, kc, pos))
    }

    pub fn children(&self, cube: &DyadicCube) -> Result<Vec<DyadicCube>> {
        (0..(1u32 << self.dim()))
            .map(|b| self.child(cube, b))
            .collect()
    }

    /// Parent cube, when one exists below the top scale.
    ///
    /// With a nonzero shift the parent of index `p` is not simply `p/2`:
    /// the shift component at the cube's own scale decides which half of
    /// the parent the cube occupies. The parent index is recovered from
    /// the left-edge arithmetic.
    pub fn parent(&self, cube: &DyadicCube) -> Option<DyadicCube> {
        if cube.scale_exp >= self.params.top_exp() {
            return None;
        }
        let kp = cube.scale_exp + 1;
        let side_p = 1i64 << (kp + self.params.l_exp);
        let per = self.params.cubes_per_dim(kp);
        let mut pos = [0u32; MAX_DIM];
        for d in 0..self.dim() as usize {
            let raw = cube.pos[d] as i64 * (side_p / 2) + self.shift_units(cube.scale_exp, d);
            let shifted = raw - self.shift_units(kp, d);
            let idx = shifted.div_euclid(side_p);
            pos[d] = if self.params.periodic {
                idx.rem_euclid(per) as u32
            } else {
                idx as u32
            };
        }
        Some(DyadicCube::new(self.axis, kp, pos))
    }

    /// The cube at scale `k` containing the cell-unit point `units`
    /// (component per dimension).
    pub fn cube_containing_units(&self, k: i32, units: &[i64]) -> DyadicCube {
        let side = 1i64 << (k + self.params.l_exp);
        let per = self.params.cubes_per_dim(k);
        let mut pos = [0u32; MAX_DIM];
        for d in 0..self.dim() as usize {
            let shifted = units[d] - self.shift_units(k, d);
            let idx = shifted.div_euclid(side);
            pos[d] = if self.params.periodic {
                idx.rem_euclid(per) as u32
            } else {
                idx.clamp(0, per - 1) as u32
            };
        }
        DyadicCube::new(self.axis, k, pos)
    }

    /// Whether `inner` is contained in `outer` (same grid).
    pub fn contains(&self, outer: &DyadicCube, inner: &DyadicCube) -> bool {
        if inner.scale_exp > outer.scale_exp {
            return false;
        }
        if inner.scale_exp == outer.scale_exp {
            return inner == outer;
        }
        let mut units = [0i64; MAX_DIM];
        for d in 0..self.dim() as usize {
            units[d] = self.left_units(inner, d);
        }
        &self.cube_containing_units(outer.scale_exp, &units[..self.dim() as usize]) == outer
    }

    /// Distance in cell units between per-dimension intervals, linear mode.
    fn interval_gap_linear(a0: i64, a1: i64, b0: i64, b1: i64) -> i64 {
        if b0 >= a1 {
            b0 - a1
        } else if a0 >= b1 {
            a0 - b1
        } else {
            0
        }
    }

    /// Distance in cell units between per-dimension intervals on the torus.
    fn interval_gap_torus(a0: i64, a1: i64, b0: i64, b1: i64, period: i64) -> i64 {
        // Reduce left endpoints; interval lengths are <= period.
        let la = a1 - a0;
        let lb = b1 - b0;
        if la >= period || lb >= period {
            return 0;
        }
        let a = a0.rem_euclid(period);
        let b = b0.rem_euclid(period);
        // gap going up from a-interval end to b-interval start, and the other way
        let up = (b - (a + la)).rem_euclid(period);
        let down = (a - (b + lb)).rem_euclid(period);
        let g = up.min(down);
        // overlapping intervals have gap 0; detect via coverage
        if up + down > period - la - lb {
            0
        } else {
            g
        }
    }

    /// ell^infty distance between two cubes of this grid, in cell units.
    pub fn distance_units(&self, a: &DyadicCube, b: &DyadicCube) -> i64 {
        let n = self.dim() as usize;
        let period = self.params.units_per_dim();
        let mut dist = 0i64;
        for d in 0..n {
            let a0 = self.left_units(a, d);
            let a1 = a0 + self.side_units(a);
            let b0 = self.left_units(b, d);
            let b1 = b0 + self.side_units(b);
            let g = if self.params.periodic {
                Self::interval_gap_torus(a0, a1, b0, b1, period)
            } else {
                Self::interval_gap_linear(a0, a1, b0, b1)
            };
            dist = dist.max(g);
        }
        dist
    }

    /// ell^infty distance from cube `i` to the boundary of cube `j`, in
    /// cell units. Same-grid cubes are either nested or disjoint.
    pub fn distance_to_boundary_units(&self, i: &DyadicCube, j: &DyadicCube) -> i64 {
        let n = self.dim() as usize;
        let period = self.params.units_per_dim();
        if self.params.periodic && self.side_units(j) >= period {
            // the torus top cube has empty boundary
            return i64::MAX;
        }
        if self.contains(j, i) {
            // min over dimensions of the margin to either face
            let mut margin = i64::MAX;
            for d in 0..n {
                let i0 = self.left_units(i, d);
                let j0 = self.left_units(j, d);
                let (i0, j0) = if self.params.periodic {
                    // place i inside j on the covering line
                    let rel = (i0 - j0).rem_euclid(period);
                    (j0 + rel, j0)
                } else {
                    (i0, j0)
                };
                let lo = i0 - j0;
                let hi = (j0 + self.side_units(j)) - (i0 + self.side_units(i));
                margin = margin.min(lo).min(hi);
            }
            margin.max(0)
        } else {
            self.distance_units(i, j)
        }
    }
}

/// Pair of shifted grids, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductGrid {
    pub grid1: ShiftedGrid,
    pub grid2: ShiftedGrid,
}

impl ProductGrid {
    pub fn new(grid1: ShiftedGrid, grid2: ShiftedGrid) -> Result<Self> {
        if grid1.axis != 1 || grid2.axis != 2 {
            return Err(Error::Config("product grid needs axes 1 and 2".to_string()));
        }
        if grid1.params != grid2.params {
            return Err(Error::Config("product grid axes share one parameter set".to_string()));
        }
        Ok(ProductGrid { grid1, grid2 })
    }

    pub fn grid(&self, axis: u8) -> &ShiftedGrid {
        if axis == 1 {
            &self.grid1
        } else {
            &self.grid2
        }
    }

    pub fn params(&self) -> &LatticeParams {
        &self.grid1.params
    }
}

/// Build the shifted grid for one parameter from an explicit shift
/// sequence (one component per scale strictly below the top cube, finest
/// first).
pub fn enumerate_grid(params: &LatticeParams, axis: u8, omega: &[u8]) -> Result<ShiftedGrid> {
    params.validate()?;
    if axis != 1 && axis != 2 {
        return Err(Error::Config("axis must be 1 or 2".to_string()));
    }
    if omega.len() != params.shift_components() {
        return Err(Error::Config(alloc::format!(
            "shift sequence has {} components, lattice needs {}",
            omega.len(),
            params.shift_components()
        )));
    }
    let mask = (1u8 << params.dim(axis)) - 1;
    if omega.iter().any(|&c| c & !mask != 0) {
        return Err(Error::Config("shift component has bits outside the dimension".to_string()));
    }
    Ok(ShiftedGrid {
        params: *params,
        axis,
        omega: omega.to_vec(),
    })
}

/// The standard (zero-shift) grid.
pub fn standard_grid(params: &LatticeParams, axis: u8) -> Result<ShiftedGrid> {
    let omega = alloc::vec![0u8; params.shift_components()];
    enumerate_grid(params, axis, &omega)
}

/// Goodness of a cube: no cube `J` of the same grid with
/// `l(J) >= 2^r l(I)` has `d(I, dJ) <= 2 l(I)^gamma l(J)^{1-gamma}`.
pub fn is_good(cube: &DyadicCube, grid: &ShiftedGrid) -> Result<bool> {
    if !grid.contains_cube(cube) {
        return Err(Error::Domain(alloc::format!("cube {cube} not in grid")));
    }
    let p = &grid.params;
    let gamma = p.gamma(grid.axis);
    let li = cube.side();
    let cell = p.cell_side();
    for kj in (cube.scale_exp + p.r as i32)..=p.top_exp() {
        let lj = fmath::exp2i(kj);
        let threshold = 2.0 * fmath::powf(li, gamma) * fmath::powf(lj, 1.0 - gamma);
        for j in grid.cubes_at(kj) {
            let d = grid.distance_to_boundary_units(cube, &j);
            if d == i64::MAX {
                continue;
            }
            if d as f64 * cell <= threshold {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Outcome of a goodness-probability computation.
#[derive(Debug, Clone, PartialEq)]
pub enum PiGood {
    /// Exhaustive enumeration over all shift sequences.
    Exact(Rational),
    /// Sampled estimate: (good count, samples, seed).
    Sampled { good: u64, samples: u64, seed: u64 },
}

impl PiGood {
    pub fn value(&self) -> f64 {
        match self {
            PiGood::Exact(r) => *r.numer() as f64 / *r.denom() as f64,
            PiGood::Sampled { good, samples, .. } => *good as f64 / *samples as f64,
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            PiGood::Exact(r) => *r.numer() == 0,
            PiGood::Sampled { good, .. } => *good == 0,
        }
    }
}

/// Exhaustive-enumeration budget for goodness probabilities.
pub const PI_GOOD_EXACT_BUDGET: u64 = 1 << 24;

/// Probability that a fixed standard cube, after a random shift, is good.
///
/// Only the shift components at the cube's scale and coarser influence
/// goodness, so the enumeration runs over those components and the result
/// is exact whenever their count is within budget.
pub fn pi_good_for_cube(params: &LatticeParams, axis: u8, cube: &DyadicCube, seed: u64) -> Result<PiGood> {
    params.validate()?;
    let n = params.dim(axis);
    let comps = params.shift_components();
    // index of the first component at scale >= l(cube)
    let first = (cube.scale_exp + params.l_exp).max(0) as usize;
    let relevant = comps.saturating_sub(first);
    let bits = relevant as u32 * n;
    let mut omega = alloc::vec![0u8; comps];
    let mask = (1u8 << n) - 1;
    if (bits as u64) <= 63 && (1u64 << bits) <= PI_GOOD_EXACT_BUDGET {
        let total = 1u64 << bits;
        let mut good = 0u64;
        for code in 0..total {
            for (i, slot) in omega.iter_mut().enumerate().skip(first) {
                let sh = ((i - first) as u32) * n;
                *slot = ((code >> sh) as u8) & mask;
            }
            let grid = enumerate_grid(params, axis, &omega)?;
            if is_good(cube, &grid)? {
                good += 1;
            }
        }
        Ok(PiGood::Exact(Rational::new(good, total)))
    } else {
        let mut rng = SeededRng::new(seed);
        let samples = 1u64 << 14;
        let mut good = 0u64;
        for _ in 0..samples {
            for slot in omega.iter_mut().skip(first) {
                *slot = (rng.next_u64() as u8) & mask;
            }
            let grid = enumerate_grid(params, axis, &omega)?;
            if is_good(cube, &grid)? {
                good += 1;
            }
        }
        Ok(PiGood::Sampled { good, samples, seed })
    }
}

/// Goodness probability for the reference standard cube: the scale-1 cube
/// with position index 0.
pub fn pi_good(params: &LatticeParams, axis: u8, seed: u64) -> Result<PiGood> {
    let cube = DyadicCube::new(axis, 0, [0; MAX_DIM]);
    pi_good_for_cube(params, axis, &cube, seed)
}

/// Per-scale goodness probabilities (reference position 0 at each scale).
pub fn pi_good_table(params: &LatticeParams, axis: u8, seed: u64) -> Result<Vec<(i32, PiGood)>> {
    params
        .scale_exps()
        .map(|k| {
            let cube = DyadicCube::new(axis, k, [0; MAX_DIM]);
            pi_good_for_cube(params, axis, &cube, seed).map(|p| (k, p))
        })
        .collect()
}

/// Membership in the truncation `D(N)`: scale between `2^-N` and `2^N`
/// and relative distance to `2^N I` at most `N`.
pub fn in_dn(cube: &DyadicCube, grid: &ShiftedGrid, n_trunc: u32) -> bool {
    let n = n_trunc as i32;
    if cube.scale_exp < -n || cube.scale_exp > n {
        return false;
    }
    let p = &grid.params;
    // the reference cube 2^N I = [-2^{N-1}, 2^{N-1})^n in cell units
    let origin = p.units_per_dim() / 2;
    let half = 1i64 << (n - 1 + p.l_exp);
    let period = p.units_per_dim();
    let mut dist_units = 0i64;
    for d in 0..grid.dim() as usize {
        let c0 = grid.left_units(cube, d);
        let c1 = c0 + grid.side_units(cube);
        let (b0, b1) = (origin - half, origin + half);
        let g = if p.periodic {
            ShiftedGrid::interval_gap_torus(c0, c1, b0, b1, period)
        } else {
            ShiftedGrid::interval_gap_linear(c0, c1, b0, b1)
        };
        dist_units = dist_units.max(g);
    }
    let d_phys = dist_units as f64 * p.cell_side();
    let denom = cube.side().max(fmath::exp2i(n));
    d_phys / denom <= n_trunc as f64
}

/// Count of `D(N)` members, with the cardinality bound `2^{3nN+n+1}`
/// asserted.
pub fn count_dn(grid: &ShiftedGrid, n_trunc: u32) -> Result<u64> {
    let mut count = 0u64;
    for cube in grid.all_cubes() {
        if in_dn(&cube, grid, n_trunc) {
            count += 1;
        }
    }
    let n = grid.dim() as u64;
    let bound_exp = 3 * n * n_trunc as u64 + n + 1;
    if bound_exp < 63 && count > (1u64 << bound_exp) {
        return Err(Error::Domain(alloc::format!(
            "D(N) cardinality {count} exceeds 2^{bound_exp}"
        )));
    }
    Ok(count)
}

/// Which alternative of the common-ancestor dichotomy applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AncestorCase {
    /// Distances large: `max{d(K,I), d(K,J)} >= c l(K)^g l(Q)^{1-g}`.
    SeparatedBound {
        /// empirical constant `c` observed in the bound
        observed_c_milli: i64,
    },
    /// Distances small: `l(Q) <= 2^r l(K)` whenever the side condition of
    /// the dichotomy holds.
    AdjacentBound,
}

/// Smallest cube of the grid containing all three inputs, plus the case
/// tag of the dichotomy. Inputs must satisfy `l(K) <= l(I) = 2 l(J)`.
pub fn common_ancestor(
    grid: &ShiftedGrid,
    i: &DyadicCube,
    j: &DyadicCube,
    k: &DyadicCube,
) -> Result<(DyadicCube, AncestorCase)> {
    for c in [i, j, k] {
        if !grid.contains_cube(c) {
            return Err(Error::Domain(alloc::format!("cube {c} not in grid")));
        }
    }
    if i.scale_exp != j.scale_exp + 1 || k.scale_exp > i.scale_exp {
        return Err(Error::Domain("need l(K) <= l(I) = 2 l(J)".to_string()));
    }
    let p = &grid.params;
    let mut q = None;
    for kq in i.scale_exp..=p.top_exp() {
        let mut units = [0i64; MAX_DIM];
        for d in 0..grid.dim() as usize {
            units[d] = grid.left_units(i, d);
        }
        let cand = grid.cube_containing_units(kq, &units[..grid.dim() as usize]);
        if grid.contains(&cand, i) && grid.contains(&cand, j) && grid.contains(&cand, k) {
            q = Some(cand);
            break;
        }
    }
    let q = q.ok_or_else(|| {
        Error::Domain("no common ancestor inside the finite lattice; enlarge M".to_string())
    })?;
    let gamma = p.gamma(grid.axis);
    let cell = p.cell_side();
    let dki = grid.distance_units(k, i) as f64 * cell;
    let dkj = grid.distance_units(k, j) as f64 * cell;
    let dmax = dki.max(dkj);
    let sep_threshold = 2.0 * fmath::powf(k.side(), gamma) * fmath::powf(j.side(), 1.0 - gamma);
    if dmax > sep_threshold {
        let scale = fmath::powf(k.side(), gamma) * fmath::powf(q.side(), 1.0 - gamma);
        let c = dmax / scale;
        Ok((
            q,
            AncestorCase::SeparatedBound {
                observed_c_milli: (c * 1000.0) as i64,
            },
        ))
    } else {
        Ok((q, AncestorCase::AdjacentBound))
    }
}

/// Case tags of the triple classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TripleCase {
    Separated,
    Adjacent,
    Nested,
}

/// Classify a triple with `l(K) <= l(I) = 2 l(J)` into exactly one of
/// separated, adjacent, nested.
pub fn classify_triple(
    grid: &ShiftedGrid,
    i: &DyadicCube,
    j: &DyadicCube,
    k: &DyadicCube,
) -> Result<TripleCase> {
    if i.scale_exp != j.scale_exp + 1 || k.scale_exp > i.scale_exp {
        return Err(Error::Domain("need l(K) <= l(I) = 2 l(J)".to_string()));
    }
    let p = &grid.params;
    let gamma = p.gamma(grid.axis);
    let cell = p.cell_side();
    let dki = grid.distance_units(k, i) as f64 * cell;
    let dkj = grid.distance_units(k, j) as f64 * cell;
    let threshold = 2.0 * fmath::powf(k.side(), gamma) * fmath::powf(j.side(), 1.0 - gamma);
    if dki.max(dkj) > threshold {
        return Ok(TripleCase::Separated);
    }
    if grid.contains(j, k) && grid.contains(i, j) {
        return Ok(TripleCase::Nested);
    }
    Ok(TripleCase::Adjacent)
}
