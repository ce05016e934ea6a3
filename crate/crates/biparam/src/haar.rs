//! Haar functions, martingale differences and averages, expansions, and
//! the truncation projections.
//!
//! The Haar system of a shifted grid together with the normalized
//! constant is an orthonormal basis of the lattice functions per
//! parameter. The mean is always carried as an explicit extra coefficient
//! so that the expansion identity is exact on the finite lattice.

use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::lattice::{in_dn, DyadicCube, ProductGrid, ShiftedGrid};
use crate::step::{cube_cells, AxisSet, StepFunction};

/// Index of one Haar function: a cube plus a bit per dimension; all-zero
/// bits give the non-cancellative normalized indicator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HaarIndex {
    pub cube: DyadicCube,
    pub eta: u8,
}

impl HaarIndex {
    pub fn cancellative(&self) -> bool {
        self.eta != 0
    }
}

/// Sign of `h^eta` on the child with low-corner bits `child_bits`.
#[inline]
fn eta_sign(eta: u8, child_bits: u32) -> f64 {
    if ((eta as u32) & child_bits).count_ones() % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// The Haar function of `idx` as a step function on its parameter.
pub fn haar(grid: &ShiftedGrid, idx: &HaarIndex) -> Result<StepFunction> {
    if !grid.contains_cube(&idx.cube) {
        return Err(Error::Domain("Haar cube not in grid".to_string()));
    }
    let p = &grid.params;
    if idx.eta != 0 && idx.cube.scale_exp <= p.finest_exp() {
        return Err(Error::Domain("cube too fine to split into halves".to_string()));
    }
    if idx.eta >= 1 << grid.dim() {
        return Err(Error::Domain("eta has bits outside the dimension".to_string()));
    }
    let axes = if grid.axis == 1 { AxisSet::One } else { AxisSet::Two };
    let mut f = StepFunction::zero(p, axes);
    let norm = fmath::powf(idx.cube.volume(p), -0.5);
    if idx.eta == 0 {
        for c in cube_cells(grid, &idx.cube) {
            f.values[c] = norm;
        }
    } else {
        for bits in 0..(1u32 << grid.dim()) {
            let child = grid.child(&idx.cube, bits)?;
            let s = eta_sign(idx.eta, bits) * norm;
            for c in cube_cells(grid, &child) {
                f.values[c] = s;
            }
        }
    }
    Ok(f)
}

/// Martingale operators along one parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Martingale {
    /// Difference between child and own averages on one cube.
    Delta(DyadicCube),
    /// Sum of `Delta` over the descendants `k` generations below the cube.
    DeltaK(DyadicCube, u32),
    /// Averaging at scale `2^k`.
    AvgAtScale(i32),
    /// Difference of consecutive averaging operators at scale `2^k`.
    DiffAtScale(i32),
}

fn axis_of(grid: &ShiftedGrid) -> AxisSet {
    if grid.axis == 1 {
        AxisSet::One
    } else {
        AxisSet::Two
    }
}

/// Number of slices of the other parameter a function carries.
fn slice_count(f: &StepFunction, axis: u8) -> usize {
    match (f.axes, axis) {
        (AxisSet::Both, 1) => f.params.cells(2),
        (AxisSet::Both, 2) => f.params.cells(1),
        _ => 1,
    }
}

#[inline]
fn flat_index(f: &StepFunction, axis: u8, own: usize, other: usize) -> usize {
    match (f.axes, axis) {
        (AxisSet::Both, 1) => own * f.params.cells(2) + other,
        (AxisSet::Both, 2) => other * f.params.cells(2) + own,
        _ => own,
    }
}

fn check_axis(f: &StepFunction, grid: &ShiftedGrid) -> Result<()> {
    let ok = match f.axes {
        AxisSet::Both => true,
        AxisSet::One => grid.axis == 1,
        AxisSet::Two => grid.axis == 2,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Domain("function does not live on the operator's axis".to_string()))
    }
}

/// Averaging operator at scale `2^k` along the grid's parameter.
pub fn avg_at_scale(f: &StepFunction, grid: &ShiftedGrid, k: i32) -> Result<StepFunction> {
    check_axis(f, grid)?;
    let p = &grid.params;
    if k < p.finest_exp() || k > p.top_exp() {
        return Err(Error::Domain("scale out of range".to_string()));
    }
    let slices = slice_count(f, grid.axis);
    let mut out = f.clone();
    for cube in grid.cubes_at(k) {
        let cells = cube_cells(grid, &cube);
        if cells.is_empty() {
            continue;
        }
        for s in 0..slices {
            let mut sum = 0.0;
            for &c in &cells {
                sum += f.values[flat_index(f, grid.axis, c, s)];
            }
            let m = sum / cells.len() as f64;
            for &c in &cells {
                out.values[flat_index(f, grid.axis, c, s)] = m;
            }
        }
    }
    Ok(out)
}

/// Apply a martingale operator along the grid's parameter.
pub fn martingale(f: &StepFunction, grid: &ShiftedGrid, which: Martingale) -> Result<StepFunction> {
    check_axis(f, grid)?;
    let p = &grid.params;
    match which {
        Martingale::AvgAtScale(k) => avg_at_scale(f, grid, k),
        Martingale::DiffAtScale(k) => {
            let fine = avg_at_scale(f, grid, k - 1)?;
            let coarse = avg_at_scale(f, grid, k)?;
            fine.sub(&coarse)
        }
        Martingale::Delta(cube) => {
            if cube.scale_exp <= p.finest_exp() {
                return Err(Error::Domain("cube has no children".to_string()));
            }
            let fine = avg_at_scale(f, grid, cube.scale_exp - 1)?;
            let coarse = avg_at_scale(f, grid, cube.scale_exp)?;
            let mut out = StepFunction::zero(&f.params, f.axes);
            let slices = slice_count(f, grid.axis);
            for c in cube_cells(grid, &cube) {
                for s in 0..slices {
                    let i = flat_index(f, grid.axis, c, s);
                    out.values[i] = fine.values[i] - coarse.values[i];
                }
            }
            Ok(out)
        }
        Martingale::DeltaK(cube, k) => {
            let ks = cube.scale_exp - k as i32;
            if ks <= p.finest_exp() {
                return Err(Error::Domain("descendant scale out of range".to_string()));
            }
            let fine = avg_at_scale(f, grid, ks - 1)?;
            let coarse = avg_at_scale(f, grid, ks)?;
            let mut out = StepFunction::zero(&f.params, f.axes);
            let slices = slice_count(f, grid.axis);
            for c in cube_cells(grid, &cube) {
                for s in 0..slices {
                    let i = flat_index(f, grid.axis, c, s);
                    out.values[i] = fine.values[i] - coarse.values[i];
                }
            }
            Ok(out)
        }
    }
}

/// One slot of the orthonormal per-parameter system: the normalized
/// constant or a cancellative Haar function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Slot {
    Mean,
    Haar(HaarIndex),
}

/// Orthonormal basis bookkeeping for one shifted grid, with matrix-free
/// forward and inverse pyramid transforms.
#[derive(Debug, Clone)]
pub struct Basis1d {
    pub grid: ShiftedGrid,
    pub slots: Vec<Slot>,
}

impl Basis1d {
    pub fn new(grid: &ShiftedGrid) -> Self {
        let p = &grid.params;
        let mut slots = vec![Slot::Mean];
        for k in (p.finest_exp() + 1)..=p.top_exp() {
            for cube in grid.cubes_at(k) {
                for eta in 1..(1u8 << grid.dim()) {
                    slots.push(Slot::Haar(HaarIndex { cube, eta }));
                }
            }
        }
        Basis1d {
            grid: grid.clone(),
            slots,
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slot_position(&self, s: &Slot) -> Option<usize> {
        self.slots.iter().position(|t| t == s)
    }

    /// Forward transform of a cell-value vector into slot coefficients.
    pub fn forward(&self, values: &[f64]) -> Vec<f64> {
        let p = &self.grid.params;
        let g = &self.grid;
        let n = g.dim();
        let cellvol = p.cell_vol(g.axis);
        // averages pyramid, keyed per scale by cube enumeration order
        let mut coeffs = vec![0.0; self.slots.len()];
        let mut prev: Vec<f64> = values.to_vec(); // finest-scale averages
        let mut slot_i = 1usize;
        for k in (p.finest_exp() + 1)..=p.top_exp() {
            let cubes = g.cubes_at(k);
            let mut avgs = vec![0.0; cubes.len()];
            for (ci, cube) in cubes.iter().enumerate() {
                // children averages in child-bits order
                let mut child_avg = [0.0f64; 8];
                for bits in 0..(1u32 << n) {
                    let child = g.child(cube, bits).unwrap();
                    let idx = cube_index_at_scale(g, &child);
                    child_avg[bits as usize] = prev[idx];
                }
                let m = fmath::exp2i(-(n as i32));
                let mean: f64 = (0..(1u32 << n)).map(|b| child_avg[b as usize]).sum::<f64>() * m;
                avgs[ci] = mean;
                let halfvol = fmath::sqrt(cube.volume(p));
                for eta in 1..(1u8 << n) {
                    let mut s = 0.0;
                    for bits in 0..(1u32 << n) {
                        s += eta_sign(eta, bits) * child_avg[bits as usize];
                    }
                    coeffs[slot_i] = halfvol * m * s;
                    slot_i += 1;
                }
            }
            prev = avgs;
        }
        // mean slot: <f, |T|^{-1/2} 1>
        let total_vol = (values.len() as f64) * cellvol;
        coeffs[0] = prev[0] * fmath::sqrt(total_vol);
        coeffs
    }

    /// Inverse transform of slot coefficients back to cell values.
    pub fn inverse(&self, coeffs: &[f64]) -> Vec<f64> {
        let p = &self.grid.params;
        let g = &self.grid;
        let n = g.dim();
        let cells = p.cells(g.axis);
        let cellvol = p.cell_vol(g.axis);
        let total_vol = cells as f64 * cellvol;
        // walk scales downward carrying partial averages
        let mut acc = vec![coeffs[0] / fmath::sqrt(total_vol)];
        // slot offsets per scale mirror the forward enumeration
        let mut scale_start = vec![];
        let mut pos = 1usize;
        for k in (p.finest_exp() + 1)..=p.top_exp() {
            scale_start.push((k, pos));
            pos += g.cubes_at(k).len() * ((1usize << n) - 1);
        }
        for (k, start) in scale_start.into_iter().rev() {
            let cubes = g.cubes_at(k);
            let finer = g.cubes_at(k - 1);
            let mut next = vec![0.0; finer.len()];
            let etas = (1usize << n) - 1;
            for (ci, cube) in cubes.iter().enumerate() {
                let inv_halfvol = fmath::powf(cube.volume(p), -0.5);
                for bits in 0..(1u32 << n) {
                    let child = g.child(cube, bits).unwrap();
                    let idx = cube_index_at_scale(g, &child);
                    let mut v = acc[ci];
                    for (ei, eta) in (1..(1u8 << n)).enumerate() {
                        v += coeffs[start + ci * etas + ei] * inv_halfvol * eta_sign(eta, bits);
                    }
                    next[idx] = v;
                }
            }
            acc = next;
        }
        acc
    }
}

/// Index of a cube within `cubes_at(scale)` enumeration order.
pub(crate) fn cube_index_at_scale(grid: &ShiftedGrid, cube: &DyadicCube) -> usize {
    let per = grid.params.cubes_per_dim(cube.scale_exp) as usize;
    let n = grid.dim() as usize;
    let mut idx = 0usize;
    // odometer order: dimension 0 fastest
    for d in (0..n).rev() {
        idx = idx * per + cube.pos[d] as usize;
    }
    idx
}

/// One-parameter expansion table: cancellative coefficients plus the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Expansion1d {
    pub grid_id: u64,
    pub coeffs: BTreeMap<HaarIndex, f64>,
    pub mean: f64,
}

/// Expand a single-parameter function over a shifted grid.
pub fn expand_1d(f: &StepFunction, grid: &ShiftedGrid) -> Result<Expansion1d> {
    check_axis(f, grid)?;
    if f.axes == AxisSet::Both {
        return Err(Error::Domain("expand_1d needs a single-parameter function".to_string()));
    }
    let basis = Basis1d::new(grid);
    let c = basis.forward(&f.values);
    let mut coeffs = BTreeMap::new();
    for (s, v) in basis.slots.iter().zip(&c) {
        if let Slot::Haar(h) = s {
            if *v != 0.0 {
                coeffs.insert(*h, *v);
            }
        }
    }
    Ok(Expansion1d {
        grid_id: grid.grid_id(),
        coeffs,
        mean: c[0],
    })
}

/// Reconstruct a single-parameter function from its table.
pub fn reconstruct_1d(table: &Expansion1d, grid: &ShiftedGrid) -> Result<StepFunction> {
    if table.grid_id != grid.grid_id() {
        return Err(Error::Domain("expansion belongs to a different grid".to_string()));
    }
    let basis = Basis1d::new(grid);
    let mut c = vec![0.0; basis.len()];
    c[0] = table.mean;
    for (i, s) in basis.slots.iter().enumerate() {
        if let Slot::Haar(h) = s {
            if let Some(v) = table.coeffs.get(h) {
                c[i] = *v;
            }
        }
    }
    let vals = basis.inverse(&c);
    let mut out = StepFunction::zero(&grid.params, axis_of(grid));
    out.values = vals;
    Ok(out)
}

/// Bi-parameter expansion: double-cancellative block plus the mixed and
/// double mean blocks, all against L2-normalized slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Expansion2d {
    pub grid_id1: u64,
    pub grid_id2: u64,
    pub dd: BTreeMap<(HaarIndex, HaarIndex), f64>,
    /// coefficients against `h_{I1} x mean2`
    pub d_mean: BTreeMap<HaarIndex, f64>,
    /// coefficients against `mean1 x h_{I2}`
    pub mean_d: BTreeMap<HaarIndex, f64>,
    pub mean_mean: f64,
}

/// Dense coefficient matrix produced by the separable transform, together
/// with its slot bases. The representation engine consumes this directly.
pub struct CoeffMatrix {
    pub basis1: Basis1d,
    pub basis2: Basis1d,
    /// `coeffs[s1 * basis2.len() + s2]`
    pub coeffs: Vec<f64>,
}

impl CoeffMatrix {
    pub fn get(&self, s1: usize, s2: usize) -> f64 {
        self.coeffs[s1 * self.basis2.len() + s2]
    }
}

/// Separable forward transform of a bi-parameter function.
pub fn transform_2d(f: &StepFunction, grids: &ProductGrid) -> Result<CoeffMatrix> {
    if f.axes != AxisSet::Both {
        return Err(Error::Domain("transform_2d needs a bi-parameter function".to_string()));
    }
    let basis1 = Basis1d::new(&grids.grid1);
    let basis2 = Basis1d::new(&grids.grid2);
    let c1 = f.params.cells(1);
    let c2 = f.params.cells(2);
    // axis-2 pass per axis-1 cell
    let mut mid = vec![0.0; c1 * basis2.len()];
    for i1 in 0..c1 {
        let row = &f.values[i1 * c2..(i1 + 1) * c2];
        let co = basis2.forward(row);
        mid[i1 * basis2.len()..(i1 + 1) * basis2.len()].copy_from_slice(&co);
    }
    // axis-1 pass per axis-2 slot
    let mut coeffs = vec![0.0; basis1.len() * basis2.len()];
    let mut col = vec![0.0; c1];
    for s2 in 0..basis2.len() {
        for i1 in 0..c1 {
            col[i1] = mid[i1 * basis2.len() + s2];
        }
        let co = basis1.forward(&col);
        for s1 in 0..basis1.len() {
            coeffs[s1 * basis2.len() + s2] = co[s1];
        }
    }
    Ok(CoeffMatrix {
        basis1,
        basis2,
        coeffs,
    })
}

/// Inverse of `transform_2d`.
pub fn inverse_2d(m: &CoeffMatrix) -> StepFunction {
    let params = m.basis1.grid.params;
    let c1 = params.cells(1);
    let c2 = params.cells(2);
    let b2 = m.basis2.len();
    // axis-1 inverse per axis-2 slot
    let mut mid = vec![0.0; c1 * b2];
    let mut col = vec![0.0; m.basis1.len()];
    for s2 in 0..b2 {
        for s1 in 0..m.basis1.len() {
            col[s1] = m.coeffs[s1 * b2 + s2];
        }
        let vals = m.basis1.inverse(&col);
        for i1 in 0..c1 {
            mid[i1 * b2 + s2] = vals[i1];
        }
    }
    // axis-2 inverse per axis-1 cell
    let mut out = StepFunction::zero(&params, AxisSet::Both);
    for i1 in 0..c1 {
        let vals = m.basis2.inverse(&mid[i1 * b2..(i1 + 1) * b2]);
        out.values[i1 * c2..(i1 + 1) * c2].copy_from_slice(&vals);
    }
    out
}

/// Expand a bi-parameter function over a product grid.
pub fn expand_2d(f: &StepFunction, grids: &ProductGrid) -> Result<Expansion2d> {
    let m = transform_2d(f, grids)?;
    let mut out = Expansion2d {
        grid_id1: grids.grid1.grid_id(),
        grid_id2: grids.grid2.grid_id(),
        dd: BTreeMap::new(),
        d_mean: BTreeMap::new(),
        mean_d: BTreeMap::new(),
        mean_mean: m.get(0, 0),
    };
    for (s1, slot1) in m.basis1.slots.iter().enumerate() {
        for (s2, slot2) in m.basis2.slots.iter().enumerate() {
            let v = m.get(s1, s2);
            if v == 0.0 {
                continue;
            }
            match (slot1, slot2) {
                (Slot::Haar(h1), Slot::Haar(h2)) => {
                    out.dd.insert((*h1, *h2), v);
                }
                (Slot::Haar(h1), Slot::Mean) => {
                    out.d_mean.insert(*h1, v);
                }
                (Slot::Mean, Slot::Haar(h2)) => {
                    out.mean_d.insert(*h2, v);
                }
                (Slot::Mean, Slot::Mean) => {}
            }
        }
    }
    Ok(out)
}

/// Reconstruct a bi-parameter function from its table.
pub fn reconstruct_2d(table: &Expansion2d, grids: &ProductGrid) -> Result<StepFunction> {
    if table.grid_id1 != grids.grid1.grid_id() || table.grid_id2 != grids.grid2.grid_id() {
        return Err(Error::Domain("expansion belongs to a different grid".to_string()));
    }
    let basis1 = Basis1d::new(&grids.grid1);
    let basis2 = Basis1d::new(&grids.grid2);
    let b2 = basis2.len();
    let mut coeffs = vec![0.0; basis1.len() * b2];
    coeffs[0] = table.mean_mean;
    let pos1: BTreeMap<HaarIndex, usize> = basis1
        .slots
        .iter()
        .enumerate()
        .filter_map(|(i, s)| match s {
            Slot::Haar(h) => Some((*h, i)),
            Slot::Mean => None,
        })
        .collect();
    let pos2: BTreeMap<HaarIndex, usize> = basis2
        .slots
        .iter()
        .enumerate()
        .filter_map(|(i, s)| match s {
            Slot::Haar(h) => Some((*h, i)),
            Slot::Mean => None,
        })
        .collect();
    for (h, v) in &table.d_mean {
        coeffs[pos1[h] * b2] = *v;
    }
    for (h, v) in &table.mean_d {
        coeffs[pos2[h]] = *v;
    }
    for ((h1, h2), v) in &table.dd {
        coeffs[pos1[h1] * b2 + pos2[h2]] = *v;
    }
    let m = CoeffMatrix {
        basis1,
        basis2,
        coeffs,
    };
    Ok(inverse_2d(&m))
}

/// Projection onto the double-cancellative coefficients with both cubes in
/// `D(N)`, and its complement within the double-cancellative block.
pub fn project_n(
    f: &StepFunction,
    grids: &ProductGrid,
    n_trunc: u32,
) -> Result<(StepFunction, StepFunction)> {
    let m = transform_2d(f, grids)?;
    let b2 = m.basis2.len();
    let mut inside = vec![0.0; m.coeffs.len()];
    let mut outside = vec![0.0; m.coeffs.len()];
    for (s1, slot1) in m.basis1.slots.iter().enumerate() {
        for (s2, slot2) in m.basis2.slots.iter().enumerate() {
            if let (Slot::Haar(h1), Slot::Haar(h2)) = (slot1, slot2) {
                let v = m.coeffs[s1 * b2 + s2];
                let keep = in_dn(&h1.cube, &grids.grid1, n_trunc)
                    && in_dn(&h2.cube, &grids.grid2, n_trunc);
                if keep {
                    inside[s1 * b2 + s2] = v;
                } else {
                    outside[s1 * b2 + s2] = v;
                }
            }
        }
    }
    let pn = inverse_2d(&CoeffMatrix {
        basis1: m.basis1.clone(),
        basis2: m.basis2.clone(),
        coeffs: inside,
    });
    let pnp = inverse_2d(&CoeffMatrix {
        basis1: m.basis1,
        basis2: m.basis2,
        coeffs: outside,
    });
    Ok((pn, pnp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{standard_grid, LatticeParams};
    use crate::rng::SeededRng;

    fn params(m: i32, l: i32) -> LatticeParams {
        LatticeParams::new(1, 1, m, l, true, 2).unwrap()
    }

    fn random_fn(p: &LatticeParams, axes: AxisSet, seed: u64) -> StepFunction {
        let mut f = StepFunction::zero(p, axes);
        let mut rng = SeededRng::new(seed);
        f.values.iter_mut().for_each(|v| *v = rng.symmetric());
        f
    }

    #[test]
    fn haar_definition_on_unit_cube() {
        let p = params(1, 2);
        let g = standard_grid(&p, 1).unwrap();
        // [0,1): scale 0, position such that left edge is at origin
        let origin_idx = ((p.units_per_dim() / 2) >> (0 + p.l_exp)) as u32;
        let cube = DyadicCube::new(1, 0, [origin_idx, 0, 0]);
        let h = haar(&g, &HaarIndex { cube, eta: 1 }).unwrap();
        // value +1 on the left half, -1 on the right (|I|^{-1/2} = 1)
        let cells = cube_cells(&g, &cube);
        assert_eq!(cells.len(), 4);
        assert_eq!(h.values[cells[0]], 1.0);
        assert_eq!(h.values[cells[1]], 1.0);
        assert_eq!(h.values[cells[2]], -1.0);
        assert_eq!(h.values[cells[3]], -1.0);
        assert!((h.l2_norm() - 1.0).abs() < 1e-14);
        assert!(h.integral().abs() < 1e-14);
    }

    #[test]
    fn haar_orthonormality_all_pairs() {
        let p = params(1, 2);
        let g = standard_grid(&p, 1).unwrap();
        let basis = Basis1d::new(&g);
        let fns: alloc::vec::Vec<StepFunction> = basis
            .slots
            .iter()
            .map(|s| match s {
                Slot::Mean => {
                    let vol = fmath::exp2i(p.top_exp());
                    StepFunction::constant(&p, AxisSet::One, fmath::powf(vol, -0.5))
                }
                Slot::Haar(h) => haar(&g, h).unwrap(),
            })
            .collect();
        for (i, a) in fns.iter().enumerate() {
            for (j, b) in fns.iter().enumerate() {
                let ip = a.inner(b).unwrap();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((ip - want).abs() < 1e-12, "slot pair ({i},{j}) gave {ip}");
            }
        }
    }

    #[test]
    fn haar_unit_norm_random_indices() {
        let p = params(2, 3);
        let g = standard_grid(&p, 1).unwrap();
        let mut rng = SeededRng::new(5);
        for _ in 0..100 {
            let k = (p.finest_exp() + 1) + (rng.below((p.top_exp() - p.finest_exp()) as u64) as i32);
            let cubes = g.cubes_at(k);
            let cube = cubes[rng.below(cubes.len() as u64) as usize];
            let h = haar(&g, &HaarIndex { cube, eta: 1 }).unwrap();
            assert!((h.l2_norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_examples() {
        let p = params(1, 2);
        let g = standard_grid(&p, 1).unwrap();
        let origin_idx = ((p.units_per_dim() / 2) >> p.l_exp) as u32;
        // f = 1_{[0,1/2)}, I = [0,1)
        let half = DyadicCube::new(1, -1, [origin_idx * 2, 0, 0]);
        let f = StepFunction::indicator(&g, &half);
        let i_cube = DyadicCube::new(1, 0, [origin_idx, 0, 0]);
        let d = martingale(&f, &g, Martingale::Delta(i_cube)).unwrap();
        let cells = cube_cells(&g, &i_cube);
        assert_eq!(d.values[cells[0]], 0.5);
        assert_eq!(d.values[cells[1]], 0.5);
        assert_eq!(d.values[cells[2]], -0.5);
        assert_eq!(d.values[cells[3]], -0.5);
        // constants are annihilated
        let c = StepFunction::constant(&p, AxisSet::One, 3.25);
        let dc = martingale(&c, &g, Martingale::Delta(i_cube)).unwrap();
        assert!(dc.sup_norm() < 1e-14);
    }

    #[test]
    fn diff_at_scale_is_sum_of_deltas() {
        let p = params(1, 3);
        let g = standard_grid(&p, 1).unwrap();
        let f = random_fn(&p, AxisSet::One, 11);
        for k in (p.finest_exp() + 1)..=p.top_exp() {
            let d = martingale(&f, &g, Martingale::DiffAtScale(k)).unwrap();
            let mut sum = StepFunction::zero(&p, AxisSet::One);
            for cube in g.cubes_at(k) {
                sum = sum
                    .add(&martingale(&f, &g, Martingale::Delta(cube)).unwrap())
                    .unwrap();
            }
            assert!(d.sub(&sum).unwrap().sup_norm() < 1e-12);
        }
    }

    #[test]
    fn expansion_roundtrip_and_parseval_1d() {
        let p = params(1, 3);
        let g = standard_grid(&p, 1).unwrap();
        let f = random_fn(&p, AxisSet::One, 23);
        let table = expand_1d(&f, &g).unwrap();
        let back = reconstruct_1d(&table, &g).unwrap();
        assert!(f.sub(&back).unwrap().sup_norm() < 1e-12);
        let coeff_sq: f64 =
            table.coeffs.values().map(|v| v * v).sum::<f64>() + table.mean * table.mean;
        assert!((f.inner(&f).unwrap() - coeff_sq).abs() < 1e-12);
    }

    #[test]
    fn expansion_of_single_haar_function() {
        let p = params(1, 2);
        let g = standard_grid(&p, 1).unwrap();
        let cube = DyadicCube::new(1, 0, [1, 0, 0]);
        let idx = HaarIndex { cube, eta: 1 };
        let h = haar(&g, &idx).unwrap();
        let table = expand_1d(&h, &g).unwrap();
        assert!(table.mean.abs() < 1e-14);
        assert_eq!(table.coeffs.len(), 1);
        assert!((table.coeffs[&idx] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_expands_to_mean_only() {
        let p = params(1, 2);
        let g = standard_grid(&p, 1).unwrap();
        let f = StepFunction::constant(&p, AxisSet::One, 2.0);
        let table = expand_1d(&f, &g).unwrap();
        assert!(table.coeffs.values().all(|v| v.abs() < 1e-13));
    }

    #[test]
    fn expansion_roundtrip_2d() {
        let p = params(1, 2);
        let grids = ProductGrid::new(
            standard_grid(&p, 1).unwrap(),
            standard_grid(&p, 2).unwrap(),
        )
        .unwrap();
        let f = random_fn(&p, AxisSet::Both, 31);
        let table = expand_2d(&f, &grids).unwrap();
        let back = reconstruct_2d(&table, &grids).unwrap();
        assert!(f.sub(&back).unwrap().sup_norm() < 1e-12);
        // Parseval over all four blocks
        let sq: f64 = table.dd.values().map(|v| v * v).sum::<f64>()
            + table.d_mean.values().map(|v| v * v).sum::<f64>()
            + table.mean_d.values().map(|v| v * v).sum::<f64>()
            + table.mean_mean * table.mean_mean;
        assert!((f.inner(&f).unwrap() - sq).abs() < 1e-12);
    }

    #[test]
    fn telescoping_identity_parent_child() {
        let p = params(1, 3);
        let g = standard_grid(&p, 1).unwrap();
        let g1 = random_fn(&p, AxisSet::One, 41);
        let g2 = random_fn(&p, AxisSet::One, 43);
        for k in p.finest_exp()..p.top_exp() {
            for cube in g.cubes_at(k) {
                let parent = g.parent(&cube).unwrap();
                let h = haar(&g, &HaarIndex { cube: parent, eta: 1 }).unwrap();
                let havg = h.average_on(&g, &cube).unwrap();
                let lhs = (g1.inner(&h).unwrap() * g2.average_on(&g, &cube).unwrap()
                    + g1.average_on(&g, &parent).unwrap() * g2.inner(&h).unwrap())
                    * havg;
                let rhs = g1.average_on(&g, &cube).unwrap() * g2.average_on(&g, &cube).unwrap()
                    - g1.average_on(&g, &parent).unwrap() * g2.average_on(&g, &parent).unwrap();
                assert!((lhs - rhs).abs() < 1e-12, "telescoping failed at {cube}");
            }
        }
    }

    #[test]
    fn delta_commute_across_axes() {
        let p = params(1, 2);
        let g1 = standard_grid(&p, 1).unwrap();
        let g2 = standard_grid(&p, 2).unwrap();
        let f = random_fn(&p, AxisSet::Both, 47);
        let c1 = DyadicCube::new(1, 0, [0, 0, 0]);
        let c2 = DyadicCube::new(2, -1, [3, 0, 0]);
        let a = martingale(
            &martingale(&f, &g1, Martingale::Delta(c1)).unwrap(),
            &g2,
            Martingale::Delta(c2),
        )
        .unwrap();
        let b = martingale(
            &martingale(&f, &g2, Martingale::Delta(c2)).unwrap(),
            &g1,
            Martingale::Delta(c1),
        )
        .unwrap();
        assert!(a.sub(&b).unwrap().sup_norm() < 1e-13);
    }

    #[test]
    fn project_n_idempotent_and_contractive() {
        let p = params(1, 2);
        let grids = ProductGrid::new(
            standard_grid(&p, 1).unwrap(),
            standard_grid(&p, 2).unwrap(),
        )
        .unwrap();
        let mut rng = SeededRng::new(3);
        for trial in 0..50 {
            let f = random_fn(&p, AxisSet::Both, 100 + trial);
            let n = (rng.below(3)) as u32;
            let (pn, pnp) = project_n(&f, &grids, n).unwrap();
            let (pn2, _) = project_n(&pn, &grids, n).unwrap();
            assert!(pn.sub(&pn2).unwrap().sup_norm() < 1e-12);
            assert!(pnp.l2_norm() <= f.l2_norm() + 1e-12);
        }
    }

    #[test]
    fn project_n_keeps_and_kills_single_haar() {
        let p = params(1, 2);
        let grids = ProductGrid::new(
            standard_grid(&p, 1).unwrap(),
            standard_grid(&p, 2).unwrap(),
        )
        .unwrap();
        let origin1 = ((p.units_per_dim() / 2) >> (0 + p.l_exp)) as u32;
        let in_cube = DyadicCube::new(1, 0, [origin1, 0, 0]);
        let h1 = haar(&grids.grid1, &HaarIndex { cube: in_cube, eta: 1 }).unwrap();
        let in2 = DyadicCube::new(2, 0, [origin1, 0, 0]);
        let h2 = haar(&grids.grid2, &HaarIndex { cube: in2, eta: 1 }).unwrap();
        let f = StepFunction::tensor(&h1, &h2).unwrap();
        // both cubes are near the origin at unit scale: inside D(1)
        let (pn, pnp) = project_n(&f, &grids, 1).unwrap();
        assert!(f.sub(&pn).unwrap().sup_norm() < 1e-12);
        assert!(pnp.sup_norm() < 1e-12);
        // a fine-scale pair falls outside D(0)
        let fine1 = DyadicCube::new(1, -1, [0, 0, 0]);
        let hf = haar(&grids.grid1, &HaarIndex { cube: fine1, eta: 1 }).unwrap();
        let f2 = StepFunction::tensor(&hf, &h2).unwrap();
        let (pn2, pnp2) = project_n(&f2, &grids, 0).unwrap();
        assert!(pn2.sup_norm() < 1e-12);
        assert!(f2.sub(&pnp2).unwrap().sup_norm() < 1e-12);
    }
}
