//! BMO and CMO functionals: one-parameter and little BMO, product BMO
//! over a configured open-set family, truncation-defect curves, the
//! bi-parameter Carleson embedding, and the sequence-space pairing
//! inequality.
//!
//! The continuum product-BMO supremum over all open sets is not
//! computable; the norm here is defined over a documented finite family:
//! all single rectangles, all unions of up to four rectangles at a common
//! scale pair (sampled with a recorded seed when the scale pair carries
//! too many rectangles), and the full domain.

use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::haar::{project_n, transform_2d, Slot};
use crate::lattice::{DyadicCube, ProductGrid, ShiftedGrid};
use crate::rng::SeededRng;
use crate::step::{cube_cells, AxisSet, StepFunction};

/// Bitmask over product cells.
#[derive(Debug, Clone, PartialEq)]
pub struct CellMask {
    pub words: Vec<u64>,
    pub bits: usize,
}

impl CellMask {
    pub fn empty(bits: usize) -> Self {
        CellMask {
            words: vec![0; bits.div_ceil(64)],
            bits,
        }
    }

    pub fn set(&mut self, i: usize) {
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn union_with(&mut self, other: &CellMask) {
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
    }

    pub fn contains_all(&self, other: &CellMask) -> bool {
        self.words
            .iter()
            .zip(&other.words)
            .all(|(a, b)| (a & b) == *b)
    }
}

/// Mask of a product rectangle.
pub fn rect_mask(grids: &ProductGrid, r1: &DyadicCube, r2: &DyadicCube) -> CellMask {
    let p = grids.params();
    let c2 = p.cells(2);
    let mut m = CellMask::empty(p.cells(1) * c2);
    for &a in &cube_cells(&grids.grid1, r1) {
        for &b in &cube_cells(&grids.grid2, r2) {
            m.set(a * c2 + b);
        }
    }
    m
}

/// One member of the open-set family.
pub struct OpenSet {
    pub mask: CellMask,
    pub volume: f64,
}

/// The configured open-set family for product BMO and Carleson suprema.
pub struct UFamily {
    pub sets: Vec<OpenSet>,
    pub rects: Vec<(DyadicCube, DyadicCube, CellMask)>,
    /// seed used when subsets had to be sampled, with the sample count
    pub sampled: Option<(u64, usize)>,
}

/// Scale pairs with at most this many rectangles get exhaustive subset
/// enumeration; larger ones are sampled.
pub const UNION_ENUM_LIMIT: usize = 16;

impl UFamily {
    pub fn standard(grids: &ProductGrid, seed: u64) -> Self {
        let p = grids.params();
        let cellvol = p.cell_vol(1) * p.cell_vol(2);
        let mut rects = Vec::new();
        for c1 in grids.grid1.all_cubes() {
            for c2 in grids.grid2.all_cubes() {
                let m = rect_mask(grids, &c1, &c2);
                rects.push((c1, c2, m));
            }
        }
        let mut sets: Vec<OpenSet> = rects
            .iter()
            .map(|(_, _, m)| OpenSet {
                volume: m.count() as f64 * cellvol,
                mask: m.clone(),
            })
            .collect();
        // unions of up to 4 rectangles at a common scale pair
        let mut sampled = None;
        let mut rng = SeededRng::new(seed);
        for k1 in p.scale_exps() {
            for k2 in p.scale_exps() {
                let pair: Vec<&(DyadicCube, DyadicCube, CellMask)> = rects
                    .iter()
                    .filter(|(a, b, _)| a.scale_exp == k1 && b.scale_exp == k2)
                    .collect();
                let n = pair.len();
                let push_union = |ids: &[usize], sets: &mut Vec<OpenSet>| {
                    let mut m = pair[ids[0]].2.clone();
                    for &i in &ids[1..] {
                        m.union_with(&pair[i].2);
                    }
                    sets.push(OpenSet {
                        volume: m.count() as f64 * cellvol,
                        mask: m,
                    });
                };
                if n <= UNION_ENUM_LIMIT {
                    for a in 0..n {
                        for b in (a + 1)..n {
                            push_union(&[a, b], &mut sets);
                            for c in (b + 1)..n {
                                push_union(&[a, b, c], &mut sets);
                                for d in (c + 1)..n {
                                    push_union(&[a, b, c, d], &mut sets);
                                }
                            }
                        }
                    }
                } else {
                    let samples = 512usize;
                    for _ in 0..samples {
                        let mut ids = [0usize; 4];
                        for slot in ids.iter_mut() {
                            *slot = rng.below(n as u64) as usize;
                        }
                        push_union(&ids, &mut sets);
                    }
                    sampled = Some((seed, samples));
                }
            }
        }
        // the full domain
        let total = p.cells(1) * p.cells(2);
        let mut full = CellMask::empty(total);
        for i in 0..total {
            full.set(i);
        }
        sets.push(OpenSet {
            volume: total as f64 * cellvol,
            mask: full,
        });
        UFamily {
            sets,
            rects,
            sampled,
        }
    }
}

/// BMO flavor selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BmoFlavor {
    /// One-parameter oscillation over the cubes of the named axis.
    OneParam(u8),
    /// Oscillation over product rectangles.
    LittleBmo,
    /// Square-sum of double-Haar coefficients over the open-set family.
    ProductBmo,
}

/// The BMO norm of a function in the requested flavor.
pub fn bmo_norm(
    b: &StepFunction,
    grids: &ProductGrid,
    family: &UFamily,
    flavor: BmoFlavor,
) -> Result<f64> {
    match flavor {
        BmoFlavor::OneParam(axis) => {
            let want = if axis == 1 { AxisSet::One } else { AxisSet::Two };
            if b.axes != want {
                return Err(Error::Domain("one-parameter BMO needs a single-axis function".to_string()));
            }
            let grid = grids.grid(axis);
            let mut best = 0.0f64;
            for cube in grid.all_cubes() {
                let cells = cube_cells(grid, &cube);
                let mean: f64 =
                    cells.iter().map(|&c| b.values[c]).sum::<f64>() / cells.len() as f64;
                let osc: f64 = cells
                    .iter()
                    .map(|&c| fmath::abs(b.values[c] - mean))
                    .sum::<f64>()
                    / cells.len() as f64;
                best = best.max(osc);
            }
            Ok(best)
        }
        BmoFlavor::LittleBmo => {
            if b.axes != AxisSet::Both {
                return Err(Error::Domain("little BMO needs a bi-parameter function".to_string()));
            }
            let p = grids.params();
            let c2 = p.cells(2);
            let mut best = 0.0f64;
            for (r1, r2, _) in &family.rects {
                let cells1 = cube_cells(&grids.grid1, r1);
                let cells2 = cube_cells(&grids.grid2, r2);
                let n = (cells1.len() * cells2.len()) as f64;
                let mut mean = 0.0;
                for &a in &cells1 {
                    for &bb in &cells2 {
                        mean += b.values[a * c2 + bb];
                    }
                }
                mean /= n;
                let mut osc = 0.0;
                for &a in &cells1 {
                    for &bb in &cells2 {
                        osc += fmath::abs(b.values[a * c2 + bb] - mean);
                    }
                }
                best = best.max(osc / n);
            }
            Ok(best)
        }
        BmoFlavor::ProductBmo => {
            if b.axes != AxisSet::Both {
                return Err(Error::Domain("product BMO needs a bi-parameter function".to_string()));
            }
            let m = transform_2d(b, grids)?;
            // coefficient per double-cancellative rectangle
            let mut rect_coeff: BTreeMap<(DyadicCube, DyadicCube), f64> = BTreeMap::new();
            for (s1, slot1) in m.basis1.slots.iter().enumerate() {
                for (s2, slot2) in m.basis2.slots.iter().enumerate() {
                    if let (Slot::Haar(h1), Slot::Haar(h2)) = (slot1, slot2) {
                        let v = m.get(s1, s2);
                        if v != 0.0 {
                            *rect_coeff.entry((h1.cube, h2.cube)).or_insert(0.0) += v * v;
                        }
                    }
                }
            }
            let masks: BTreeMap<(DyadicCube, DyadicCube), &CellMask> = family
                .rects
                .iter()
                .map(|(a, b2, m2)| ((*a, *b2), m2))
                .collect();
            let mut best = 0.0f64;
            for u in &family.sets {
                let mut s = 0.0;
                for ((c1, c2), sq) in &rect_coeff {
                    if u.mask.contains_all(masks[&(*c1, *c2)]) {
                        s += sq;
                    }
                }
                best = best.max(s / u.volume);
            }
            Ok(fmath::sqrt(best))
        }
    }
}

/// Flavor norm of the orthogonal truncation: the finite-scale surrogate
/// for CMO membership.
pub fn cmo_defect(
    b: &StepFunction,
    grids: &ProductGrid,
    family: &UFamily,
    n_trunc: u32,
    flavor: BmoFlavor,
) -> Result<f64> {
    let (_, pnp) = project_n(b, grids, n_trunc)?;
    bmo_norm(&pnp, grids, family, flavor)
}

/// Finitely supported nonnegative rectangle weights.
#[derive(Debug, Clone, Default)]
pub struct CarlesonFamily {
    pub lambda: BTreeMap<(DyadicCube, DyadicCube), f64>,
}

impl CarlesonFamily {
    pub fn insert(&mut self, r1: DyadicCube, r2: DyadicCube, v: f64) -> Result<()> {
        if v < 0.0 {
            return Err(Error::Domain("Carleson weights are nonnegative".to_string()));
        }
        self.lambda.insert((r1, r2), v);
        Ok(())
    }
}

/// Best packing constant: `max_U sum_{R inside U} lambda_R / |U|`.
pub fn carleson_check(
    lam: &CarlesonFamily,
    _grids: &ProductGrid,
    family: &UFamily,
) -> Result<f64> {
    let masks: BTreeMap<(DyadicCube, DyadicCube), &CellMask> = family
        .rects
        .iter()
        .map(|(a, b, m)| ((*a, *b), m))
        .collect();
    let mut best = 0.0f64;
    for u in &family.sets {
        let mut s = 0.0;
        for (key, v) in &lam.lambda {
            let m = masks
                .get(key)
                .ok_or_else(|| Error::Domain("rectangle outside the family".to_string()))?;
            if u.mask.contains_all(m) {
                s += v;
            }
        }
        best = best.max(s / u.volume);
    }
    Ok(best)
}

/// Both sides of the embedding inequality: `sum lambda_R a_R` against
/// `C1 int sup_{x in R} a_R dx`, with the observed proportionality.
pub fn carleson_embed(
    lam: &CarlesonFamily,
    a: &BTreeMap<(DyadicCube, DyadicCube), f64>,
    grids: &ProductGrid,
    family: &UFamily,
) -> Result<(f64, f64, f64)> {
    let c1 = carleson_check(lam, grids, family)?;
    let p = grids.params();
    let cells = p.cells(1) * p.cells(2);
    let cellvol = p.cell_vol(1) * p.cell_vol(2);
    let mut lhs = 0.0;
    for (key, l) in &lam.lambda {
        if let Some(av) = a.get(key) {
            lhs += l * av;
        }
    }
    // int sup_{x in R} a_R dx over the union of supports
    let mut sup_field = vec![0.0f64; cells];
    for ((r1, r2), av) in a {
        let mask = rect_mask(grids, r1, r2);
        for (wi, w) in mask.words.iter().enumerate() {
            let mut bits = *w;
            while bits != 0 {
                let b = bits.trailing_zeros() as usize;
                let idx = wi * 64 + b;
                if sup_field[idx] < *av {
                    sup_field[idx] = *av;
                }
                bits &= bits - 1;
            }
        }
    }
    let rhs: f64 = sup_field.iter().sum::<f64>() * cellvol;
    let c = if rhs > 0.0 && c1 > 0.0 {
        lhs / (c1 * rhs)
    } else {
        0.0
    };
    Ok((lhs, rhs, c))
}

/// Both sides of the sequence pairing inequality
/// `sum |a_I||b_I| <= C sup_Q (|Q|^{-1} sum_{I in Q} |a_I|^2)^{1/2}
///  || (sum |b_I|^2 1_I / |I|)^{1/2} ||_{L^1}`
/// over one-parameter cubes of a single grid.
pub fn h1_bmo_pair(
    grid: &ShiftedGrid,
    a: &BTreeMap<DyadicCube, f64>,
    b: &BTreeMap<DyadicCube, f64>,
) -> Result<(f64, f64, f64, f64)> {
    let p = &grid.params;
    let mut lhs = 0.0;
    for (cube, av) in a {
        if let Some(bv) = b.get(cube) {
            lhs += fmath::abs(*av) * fmath::abs(*bv);
        }
    }
    // BMO-type factor of the a-sequence
    let mut bmo_factor = 0.0f64;
    for q in grid.all_cubes() {
        let mut s = 0.0;
        for (cube, av) in a {
            if grid.contains(&q, cube) {
                s += av * av;
            }
        }
        bmo_factor = bmo_factor.max(s / q.volume(p));
    }
    let bmo_factor = fmath::sqrt(bmo_factor);
    // square-function L1 factor of the b-sequence
    let cells = p.cells(grid.axis);
    let mut sq = vec![0.0f64; cells];
    for (cube, bv) in b {
        let vol = cube.volume(p);
        for c in cube_cells(grid, cube) {
            sq[c] += bv * bv / vol;
        }
    }
    let l1: f64 = sq.iter().map(|v| fmath::sqrt(*v)).sum::<f64>() * p.cell_vol(grid.axis);
    let denom = bmo_factor * l1;
    let ratio = if denom > 0.0 { lhs / denom } else { 0.0 };
    Ok((lhs, bmo_factor, l1, ratio))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::haar::{haar, HaarIndex};
    use crate::lattice::{standard_grid, LatticeParams};
    use crate::step::StepFunction;

    fn setup() -> (LatticeParams, ProductGrid, UFamily) {
        let p = LatticeParams::new(1, 1, 1, 1, true, 3).unwrap();
        let grids = ProductGrid::new(
            standard_grid(&p, 1).unwrap(),
            standard_grid(&p, 2).unwrap(),
        )
        .unwrap();
        let fam = UFamily::standard(&grids, 99);
        (p, grids, fam)
    }

    #[test]
    fn constants_have_zero_bmo_every_flavor() {
        let (p, grids, fam) = setup();
        let c2 = StepFunction::constant(&p, AxisSet::Both, 3.5);
        assert_eq!(bmo_norm(&c2, &grids, &fam, BmoFlavor::LittleBmo).unwrap(), 0.0);
        assert!(bmo_norm(&c2, &grids, &fam, BmoFlavor::ProductBmo).unwrap() < 1e-12);
        let c1 = StepFunction::constant(&p, AxisSet::One, -2.0);
        assert_eq!(bmo_norm(&c1, &grids, &fam, BmoFlavor::OneParam(1)).unwrap(), 0.0);
    }

    #[test]
    fn bmo_invariant_under_adding_constants() {
        let (p, grids, fam) = setup();
        let mut rng = crate::rng::SeededRng::new(7);
        let mut b = StepFunction::zero(&p, AxisSet::Both);
        b.values.iter_mut().for_each(|v| *v = rng.symmetric());
        let shifted = b.add(&StepFunction::constant(&p, AxisSet::Both, 11.0)).unwrap();
        for flavor in [BmoFlavor::LittleBmo, BmoFlavor::ProductBmo] {
            let n1 = bmo_norm(&b, &grids, &fam, flavor).unwrap();
            let n2 = bmo_norm(&shifted, &grids, &fam, flavor).unwrap();
            assert!((n1 - n2).abs() < 1e-12, "{flavor:?}: {n1} vs {n2}");
        }
    }

    #[test]
    fn single_haar_tensor_product_bmo_value() {
        let (p, grids, fam) = setup();
        // b = h_{I1} x h_{I2}: the single coefficient is 1, so the norm is
        // max over U containing R of |U|^{-1/2}, attained at U = R
        let c1 = DyadicCube::new(1, 0, [1, 0, 0]);
        let c2 = DyadicCube::new(2, 0, [2, 0, 0]);
        let h1 = haar(&grids.grid1, &HaarIndex { cube: c1, eta: 1 }).unwrap();
        let h2 = haar(&grids.grid2, &HaarIndex { cube: c2, eta: 1 }).unwrap();
        let b = StepFunction::tensor(&h1, &h2).unwrap();
        let norm = bmo_norm(&b, &grids, &fam, BmoFlavor::ProductBmo).unwrap();
        let rect_vol = c1.volume(&p) * c2.volume(&p);
        assert!((norm - fmath::powf(rect_vol, -0.5)).abs() < 1e-12);
    }

    #[test]
    fn staircase_bmo_matches_direct_enumeration() {
        let (p, grids, fam) = setup();
        // a two-level staircase in the first axis
        let mut b = StepFunction::zero(&p, AxisSet::Both);
        let c2 = p.cells(2);
        for i1 in 0..p.cells(1) {
            for i2 in 0..c2 {
                b.values[i1 * c2 + i2] = if i1 < p.cells(1) / 2 { 1.0 } else { 0.0 };
            }
        }
        let norm = bmo_norm(&b, &grids, &fam, BmoFlavor::LittleBmo).unwrap();
        // direct oracle over rectangles
        let mut best = 0.0f64;
        for (r1, r2, _) in &fam.rects {
            let cells1 = cube_cells(&grids.grid1, r1);
            let cells2 = cube_cells(&grids.grid2, r2);
            let n = (cells1.len() * cells2.len()) as f64;
            let mut mean = 0.0;
            for &a in &cells1 {
                for &bb in &cells2 {
                    mean += b.values[a * c2 + bb];
                }
            }
            mean /= n;
            let mut osc = 0.0;
            for &a in &cells1 {
                for &bb in &cells2 {
                    osc += fmath::abs(b.values[a * c2 + bb] - mean);
                }
            }
            best = best.max(osc / n);
        }
        assert!((norm - best).abs() < 1e-13);
    }

    #[test]
    fn cmo_defect_monotone_and_terminal_zero() {
        let (p, grids, fam) = setup();
        let mut rng = crate::rng::SeededRng::new(13);
        for trial in 0..20 {
            let mut b = StepFunction::zero(&p, AxisSet::Both);
            b.values.iter_mut().for_each(|v| *v = rng.symmetric());
            let mut prev = f64::INFINITY;
            for n in 0..4u32 {
                let d = cmo_defect(&b, &grids, &fam, n, BmoFlavor::ProductBmo).unwrap();
                assert!(
                    d <= prev + 1e-12,
                    "trial {trial}: defect increased {prev} -> {d} at N={n}"
                );
                prev = d;
            }
            // terminal N covers all scales on this lattice
            let terminal = cmo_defect(&b, &grids, &fam, 3, BmoFlavor::ProductBmo).unwrap();
            assert!(terminal < 1e-12);
        }
    }

    #[test]
    fn defect_of_fine_haar_outside_dn() {
        let (_p, grids, fam) = setup();
        // [-2,-1) at unit scale: separated from the unit reference cube,
        // hence outside D(0)
        let fine1 = DyadicCube::new(1, 0, [0, 0, 0]);
        let c2 = DyadicCube::new(2, 0, [1, 0, 0]);
        let h1 = haar(&grids.grid1, &HaarIndex { cube: fine1, eta: 1 }).unwrap();
        let h2 = haar(&grids.grid2, &HaarIndex { cube: c2, eta: 1 }).unwrap();
        let b = StepFunction::tensor(&h1, &h2).unwrap();
        let full = bmo_norm(&b, &grids, &fam, BmoFlavor::ProductBmo).unwrap();
        let d0 = cmo_defect(&b, &grids, &fam, 0, BmoFlavor::ProductBmo).unwrap();
        assert!((full - d0).abs() < 1e-12, "fine Haar is entirely outside D(0)");
    }

    #[test]
    fn carleson_point_mass_and_scaling() {
        let (p, grids, fam) = setup();
        let r1 = DyadicCube::new(1, 0, [1, 0, 0]);
        let r2 = DyadicCube::new(2, -1, [3, 0, 0]);
        let mut lam = CarlesonFamily::default();
        let vol = r1.volume(&p) * r2.volume(&p);
        lam.insert(r1, r2, vol).unwrap();
        let c1 = carleson_check(&lam, &grids, &fam).unwrap();
        assert!((c1 - 1.0).abs() < 1e-12, "point mass normalized to its volume");
        // linear scaling
        let mut lam3 = CarlesonFamily::default();
        lam3.insert(r1, r2, 3.0 * vol).unwrap();
        let c3 = carleson_check(&lam3, &grids, &fam).unwrap();
        assert!((c3 - 3.0 * c1).abs() < 1e-12);
    }

    #[test]
    fn carleson_embedding_holds_on_random_trials() {
        let (_p, grids, fam) = setup();
        let mut rng = crate::rng::SeededRng::new(21);
        let rects: Vec<(DyadicCube, DyadicCube)> =
            fam.rects.iter().map(|(a, b, _)| (*a, *b)).collect();
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let mut lam = CarlesonFamily::default();
            let mut a = BTreeMap::new();
            for _ in 0..6 {
                let (r1, r2) = rects[rng.below(rects.len() as u64) as usize];
                lam.insert(r1, r2, rng.uniform()).unwrap();
                a.insert((r1, r2), rng.uniform());
            }
            let c1 = carleson_check(&lam, &grids, &fam).unwrap();
            if c1 == 0.0 {
                continue;
            }
            let (lhs, rhs, c) = carleson_embed(&lam, &a, &grids, &fam).unwrap();
            assert!(lhs >= 0.0 && rhs >= 0.0);
            worst = worst.max(c);
        }
        // the embedding constant observed over all trials stays bounded
        assert!(worst <= 1.0 + 1e-9, "observed embedding constant {worst}");
    }

    #[test]
    fn h1_bmo_single_cube_is_cauchy_schwarz() {
        let p = LatticeParams::new(1, 1, 1, 1, true, 3).unwrap();
        let g = standard_grid(&p, 1).unwrap();
        let cube = DyadicCube::new(1, 0, [2, 0, 0]);
        let mut a = BTreeMap::new();
        let mut b = BTreeMap::new();
        a.insert(cube, 0.7);
        b.insert(cube, -1.3);
        let (lhs, bmo, l1, ratio) = h1_bmo_pair(&g, &a, &b).unwrap();
        assert!((lhs - 0.7 * 1.3).abs() < 1e-14);
        assert!(bmo > 0.0 && l1 > 0.0);
        assert!(ratio <= 1.0 + 1e-12, "single-term ratio is at most 1, got {ratio}");
    }

    #[test]
    fn h1_bmo_tower_and_random_trials() {
        let p = LatticeParams::new(1, 1, 1, 2, true, 3).unwrap();
        let g = standard_grid(&p, 1).unwrap();
        // nested tower with coefficients |I|^{1/2}
        let mut a = BTreeMap::new();
        let mut b = BTreeMap::new();
        let mut cube = DyadicCube::new(1, p.top_exp(), [0, 0, 0]);
        loop {
            let v = fmath::sqrt(cube.volume(&p));
            a.insert(cube, v);
            b.insert(cube, v);
            if cube.scale_exp == p.finest_exp() {
                break;
            }
            cube = g.child(&cube, 0).unwrap();
        }
        let (lhs, bmo, l1, ratio) = h1_bmo_pair(&g, &a, &b).unwrap();
        // direct check of the left side
        let want: f64 = a.values().map(|v| v * v).sum();
        assert!((lhs - want).abs() < 1e-12);
        assert!(bmo > 0.0 && l1 > 0.0 && ratio.is_finite());
        // random trials stay bounded
        let mut rng = crate::rng::SeededRng::new(31);
        let cubes = g.all_cubes();
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let mut a = BTreeMap::new();
            let mut b = BTreeMap::new();
            for _ in 0..8 {
                let c = cubes[rng.below(cubes.len() as u64) as usize];
                a.insert(c, rng.symmetric());
                b.insert(c, rng.symmetric());
            }
            let (_, _, _, r) = h1_bmo_pair(&g, &a, &b).unwrap();
            worst = worst.max(r);
        }
        assert!(worst.is_finite() && worst <= 4.0, "pairing constant {worst}");
    }
}
