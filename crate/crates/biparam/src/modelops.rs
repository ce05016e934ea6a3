//! Dyadic model operators: multilinear bi-parameter shifts, partial
//! paraproducts, and full paraproducts, with coefficient validation,
//! application, slot adjoints, and exact or Monte-Carlo grid averaging.
//!
//! Coefficient tables are sparse maps keyed by the outer cube pair and
//! then by the slot tuple; iteration order is the map order, which keeps
//! every reduction deterministic.

use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::kernels::TriForm;
use crate::lattice::{enumerate_grid, in_dn, DyadicCube, LatticeParams, ProductGrid};
use crate::oscillation::{carleson_check, CarlesonFamily, UFamily};
use crate::rng::SeededRng;
use crate::step::{cube_cells, AxisSet, StepFunction};

/// Per-slot, per-axis Haar pattern: `0` is the normalized indicator, a
/// nonzero value is the cancellative sign pattern.
pub type HaarPat = u8;

/// Pairing of a bi-parameter function against an L2-normalized Haar-type
/// tensor `h^{e1}_{c1} (x) h^{e2}_{c2}`.
pub fn pair_tensor(
    f: &StepFunction,
    grids: &ProductGrid,
    c1: &DyadicCube,
    e1: HaarPat,
    c2: &DyadicCube,
    e2: HaarPat,
) -> f64 {
    let p = grids.params();
    let cells2 = p.cells(2);
    let vals1 = haar_cell_values(&grids.grid1, c1, e1, p);
    let vals2 = haar_cell_values(&grids.grid2, c2, e2, p);
    let vol = p.cell_vol(1) * p.cell_vol(2);
    let mut s = 0.0;
    for (a, u) in &vals1 {
        let row = &f.values[a * cells2..(a + 1) * cells2];
        for (b, v) in &vals2 {
            s += row[*b] * u * v;
        }
    }
    s * vol
}

/// Cell values of one Haar-type factor: `(cell index, value)` pairs.
pub fn haar_cell_values(
    grid: &crate::lattice::ShiftedGrid,
    cube: &DyadicCube,
    eta: HaarPat,
    params: &LatticeParams,
) -> Vec<(usize, f64)> {
    let norm = fmath::powf(cube.volume(params), -0.5);
    if eta == 0 {
        cube_cells(grid, cube)
            .into_iter()
            .map(|c| (c, norm))
            .collect()
    } else {
        let mut out = Vec::new();
        for bits in 0..(1u32 << grid.dim()) {
            let child = grid.child(cube, bits).unwrap();
            let sign = if ((eta as u32) & bits).count_ones() % 2 == 0 {
                norm
            } else {
                -norm
            };
            for c in cube_cells(grid, &child) {
                out.push((c, sign));
            }
        }
        out
    }
}

/// Key of one shift coefficient: the outer cube pair and the slot cubes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ShiftKey {
    pub q: (DyadicCube, DyadicCube),
    pub cubes: Vec<(DyadicCube, DyadicCube)>,
}

/// An m-linear bi-parameter shift with fixed complexity and patterns.
#[derive(Debug, Clone)]
pub struct ShiftOp {
    pub grids: ProductGrid,
    /// per-slot (axis1 depth, axis2 depth) below the outer cubes
    pub complexity: Vec<(u32, u32)>,
    /// per-slot (axis1 pattern, axis2 pattern)
    pub pattern: Vec<(HaarPat, HaarPat)>,
    pub coeffs: BTreeMap<ShiftKey, f64>,
}

impl ShiftOp {
    pub fn new(
        grids: ProductGrid,
        complexity: Vec<(u32, u32)>,
        pattern: Vec<(HaarPat, HaarPat)>,
    ) -> Result<Self> {
        if complexity.len() != pattern.len() || complexity.len() < 2 {
            return Err(Error::Config("need m+1 >= 2 slots".to_string()));
        }
        for axis in 0..2 {
            let canc = pattern
                .iter()
                .filter(|(a, b)| if axis == 0 { *a != 0 } else { *b != 0 })
                .count();
            if canc < 2 {
                return Err(Error::Config(
                    "a shift needs two cancellative slots per axis".to_string(),
                ));
            }
        }
        Ok(ShiftOp {
            grids,
            complexity,
            pattern,
            coeffs: BTreeMap::new(),
        })
    }

    pub fn slots(&self) -> usize {
        self.complexity.len()
    }

    pub fn insert(&mut self, key: ShiftKey, value: f64) -> Result<()> {
        if key.cubes.len() != self.slots() {
            return Err(Error::Config("key arity mismatch".to_string()));
        }
        for (j, (c1, c2)) in key.cubes.iter().enumerate() {
            let want = self.complexity[j];
            if key.q.0.scale_exp - c1.scale_exp != want.0 as i32
                || key.q.1.scale_exp - c2.scale_exp != want.1 as i32
            {
                return Err(Error::Config("slot cube depth violates the complexity".to_string()));
            }
            if !self.grids.grid1.contains(&key.q.0, c1) || !self.grids.grid2.contains(&key.q.1, c2)
            {
                return Err(Error::Config("slot cube outside the outer cube".to_string()));
            }
        }
        if value != 0.0 {
            *self.coeffs.entry(key).or_insert(0.0) += value;
        }
        Ok(())
    }

    /// The coefficient normalization cap `prod |I_j|^{1/2} / |Q|^m`.
    pub fn normalization(&self, key: &ShiftKey) -> f64 {
        let p = self.grids.params();
        let m = self.slots() - 1;
        let mut prod = 1.0;
        for (c1, c2) in &key.cubes {
            prod *= fmath::sqrt(c1.volume(p) * c2.volume(p));
        }
        prod / fmath::powf(key.q.0.volume(p) * key.q.1.volume(p), m as f64)
    }

    /// Apply to `m` inputs, producing the output expansion.
    pub fn apply(&self, fs: &[&StepFunction]) -> Result<StepFunction> {
        let m = self.slots() - 1;
        if fs.len() != m {
            return Err(Error::Domain("apply needs m inputs".to_string()));
        }
        let p = self.grids.params();
        let cells2 = p.cells(2);
        let mut out = StepFunction::zero(p, AxisSet::Both);
        for (key, a) in &self.coeffs {
            let mut lambda = *a;
            for j in 0..m {
                let (c1, c2) = &key.cubes[j];
                let (e1, e2) = self.pattern[j];
                lambda *= pair_tensor(fs[j], &self.grids, c1, e1, c2, e2);
            }
            if lambda == 0.0 {
                continue;
            }
            let (c1, c2) = &key.cubes[m];
            let (e1, e2) = self.pattern[m];
            let vals1 = haar_cell_values(&self.grids.grid1, c1, e1, p);
            let vals2 = haar_cell_values(&self.grids.grid2, c2, e2, p);
            for (ci, u) in &vals1 {
                for (cj, v) in &vals2 {
                    out.values[ci * cells2 + cj] += lambda * u * v;
                }
            }
        }
        Ok(out)
    }

    /// Return the partial adjoint exchanging slot `j1` (axis 1) and `j2`
    /// (axis 2) with the output slot; `0` keeps an axis untouched.
    pub fn adjoint(&self, j1: usize, j2: usize) -> Result<ShiftOp> {
        let m = self.slots() - 1;
        if j1 > m || j2 > m {
            return Err(Error::Domain("adjoint slot out of range".to_string()));
        }
        let perm = |j: usize, idx: usize| -> usize {
            if j == 0 {
                idx
            } else if idx == j - 1 {
                m
            } else if idx == m {
                j - 1
            } else {
                idx
            }
        };
        let mut complexity = self.complexity.clone();
        let mut pattern = self.pattern.clone();
        for idx in 0..=m {
            complexity[idx] = (
                self.complexity[perm(j1, idx)].0,
                self.complexity[perm(j2, idx)].1,
            );
            pattern[idx] = (
                self.pattern[perm(j1, idx)].0,
                self.pattern[perm(j2, idx)].1,
            );
        }
        let mut out = ShiftOp::new(self.grids.clone(), complexity, pattern)?;
        for (key, a) in &self.coeffs {
            let cubes: Vec<(DyadicCube, DyadicCube)> = (0..=m)
                .map(|idx| {
                    (
                        key.cubes[perm(j1, idx)].0,
                        key.cubes[perm(j2, idx)].1,
                    )
                })
                .collect();
            out.insert(
                ShiftKey {
                    q: key.q,
                    cubes,
                },
                *a,
            )?;
        }
        Ok(out)
    }
}

impl TriForm for ShiftOp {
    fn lattice(&self) -> &LatticeParams {
        self.grids.params()
    }

    fn form(&self, f1: &StepFunction, f2: &StepFunction, f3: &StepFunction) -> f64 {
        debug_assert_eq!(self.slots(), 3);
        let fs = [f1, f2, f3];
        let mut total = 0.0;
        for (key, a) in &self.coeffs {
            let mut term = *a;
            for j in 0..3 {
                let (c1, c2) = &key.cubes[j];
                let (e1, e2) = self.pattern[j];
                term *= pair_tensor(fs[j], &self.grids, c1, e1, c2, e2);
                if term == 0.0 {
                    break;
                }
            }
            total += term;
        }
        total
    }

    fn form_tensor(&self, u: [&StepFunction; 3], v: [&StepFunction; 3]) -> f64 {
        debug_assert_eq!(self.slots(), 3);
        let p = self.grids.params();
        let vol1 = p.cell_vol(1);
        let vol2 = p.cell_vol(2);
        let mut total = 0.0;
        for (key, a) in &self.coeffs {
            let mut term = *a;
            for j in 0..3 {
                let (c1, c2) = &key.cubes[j];
                let (e1, e2) = self.pattern[j];
                let p1: f64 = haar_cell_values(&self.grids.grid1, c1, e1, p)
                    .iter()
                    .map(|(c, w)| u[j].values[*c] * w)
                    .sum::<f64>()
                    * vol1;
                let p2: f64 = haar_cell_values(&self.grids.grid2, c2, e2, p)
                    .iter()
                    .map(|(c, w)| v[j].values[*c] * w)
                    .sum::<f64>()
                    * vol2;
                term *= p1 * p2;
                if term == 0.0 {
                    break;
                }
            }
            total += term;
        }
        total
    }
}

/// Validation outcome shared by the three operator families.
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub max_ratio: f64,
    pub valid: bool,
    /// certificate per outer cube: the attained normalization ratio
    pub certificates: BTreeMap<ShiftKey, f64>,
    /// `(N, sup over excluded outer cubes of the certificate)`
    pub tail_curve: Vec<(u32, f64)>,
    pub witness: Option<ShiftKey>,
}

pub const VALIDATION_SLACK: f64 = 1e-12;

/// Check every normalization inequality of a shift and produce the tail
/// curve of certificates over the truncations.
pub fn validate_shift(op: &ShiftOp, n_ladder: &[u32]) -> ValidationReport {
    let mut certificates: BTreeMap<ShiftKey, f64> = BTreeMap::new();
    let mut max_ratio = 0.0f64;
    let mut witness = None;
    for (key, a) in &op.coeffs {
        let cap = op.normalization(key);
        let ratio = fmath::abs(*a) / cap;
        let qkey = ShiftKey {
            q: key.q,
            cubes: vec![],
        };
        let e = certificates.entry(qkey).or_insert(0.0);
        if ratio > *e {
            *e = ratio;
        }
        if ratio > max_ratio {
            max_ratio = ratio;
            if ratio > 1.0 + VALIDATION_SLACK {
                witness = Some(key.clone());
            }
        }
    }
    let tail_curve = n_ladder
        .iter()
        .map(|&n| {
            let sup = certificates
                .iter()
                .filter(|(k, _)| {
                    !(in_dn(&k.q.0, &op.grids.grid1, n) && in_dn(&k.q.1, &op.grids.grid2, n))
                })
                .map(|(_, v)| *v)
                .fold(0.0f64, f64::max);
            (n, sup)
        })
        .collect();
    ValidationReport {
        valid: max_ratio <= 1.0 + VALIDATION_SLACK,
        max_ratio,
        certificates,
        tail_curve,
        witness,
    }
}

/// Per-cube localized bound: the single-Q piece of a shift is dominated
/// by its certificate times the product of input averages on Q.
pub fn localized_bound_check(op: &ShiftOp, fs: &[&StepFunction]) -> Result<f64> {
    let m = op.slots() - 1;
    if fs.len() != m {
        return Err(Error::Domain("need m inputs".to_string()));
    }
    let p = op.grids.params();
    let cells2 = p.cells(2);
    let mut worst = 0.0f64;
    // group coefficients per outer cube
    let mut by_q: BTreeMap<(DyadicCube, DyadicCube), Vec<(&ShiftKey, f64)>> = BTreeMap::new();
    for (k, a) in &op.coeffs {
        by_q.entry(k.q).or_default().push((k, *a));
    }
    for (q, entries) in by_q {
        // F(Q): attained certificate on this cube
        let fq = entries
            .iter()
            .map(|(k, a)| fmath::abs(*a) / op.normalization(k))
            .fold(0.0f64, f64::max);
        // assemble the single-Q piece
        let mut piece = StepFunction::zero(p, AxisSet::Both);
        for (key, a) in &entries {
            let mut lambda = *a;
            for j in 0..m {
                let (c1, c2) = &key.cubes[j];
                let (e1, e2) = op.pattern[j];
                lambda *= pair_tensor(fs[j], &op.grids, c1, e1, c2, e2);
            }
            if lambda == 0.0 {
                continue;
            }
            let (c1, c2) = &key.cubes[m];
            let (e1, e2) = op.pattern[m];
            for (ci, u) in haar_cell_values(&op.grids.grid1, c1, e1, p) {
                for (cj, v) in haar_cell_values(&op.grids.grid2, c2, e2, p) {
                    piece.values[ci * cells2 + cj] += lambda * u * v;
                }
            }
        }
        let mut avg_prod = 1.0;
        for f in fs {
            let mut absf = (*f).clone();
            absf.values.iter_mut().for_each(|v| *v = fmath::abs(*v));
            avg_prod *= absf.average_on_rect(&op.grids, &q.0, &q.1)?;
        }
        let sup = piece.sup_norm();
        if fq > 0.0 && avg_prod > 0.0 {
            worst = worst.max(sup / (fq * avg_prod));
        } else if sup > 1e-300 {
            worst = f64::INFINITY;
        }
    }
    Ok(worst)
}

/// Key of one partial-paraproduct coefficient.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct PpKey {
    pub q_haar: DyadicCube,
    pub cubes: Vec<DyadicCube>,
    pub q_other: DyadicCube,
}

/// Partial paraproduct: Haar structure on one parameter, BMO-normalized
/// coefficient sequences in the other.
#[derive(Debug, Clone)]
pub struct PartialParaproductOp {
    pub grids: ProductGrid,
    pub haar_axis: u8,
    /// slot carrying the cancellative factor on the non-Haar axis
    pub special_slot: usize,
    /// depths of the slot cubes below `q_haar` on the Haar axis
    pub complexity: Vec<u32>,
    /// Haar-axis patterns per slot
    pub pattern: Vec<HaarPat>,
    pub coeffs: BTreeMap<PpKey, f64>,
}

impl PartialParaproductOp {
    pub fn new(
        grids: ProductGrid,
        haar_axis: u8,
        special_slot: usize,
        complexity: Vec<u32>,
        pattern: Vec<HaarPat>,
    ) -> Result<Self> {
        if complexity.len() != pattern.len() || complexity.len() < 2 {
            return Err(Error::Config("need m+1 >= 2 slots".to_string()));
        }
        if special_slot >= complexity.len() {
            return Err(Error::Config("special slot out of range".to_string()));
        }
        if pattern.iter().filter(|e| **e != 0).count() < 2 {
            return Err(Error::Config(
                "a partial paraproduct needs two cancellative slots on the Haar axis".to_string(),
            ));
        }
        Ok(PartialParaproductOp {
            grids,
            haar_axis,
            special_slot,
            complexity,
            pattern,
            coeffs: BTreeMap::new(),
        })
    }

    pub fn slots(&self) -> usize {
        self.complexity.len()
    }

    pub fn insert(&mut self, key: PpKey, value: f64) -> Result<()> {
        if key.cubes.len() != self.slots() {
            return Err(Error::Config("key arity mismatch".to_string()));
        }
        let haar_grid = self.grids.grid(self.haar_axis);
        for (j, c) in key.cubes.iter().enumerate() {
            if key.q_haar.scale_exp - c.scale_exp != self.complexity[j] as i32
                || !haar_grid.contains(&key.q_haar, c)
            {
                return Err(Error::Config("slot cube depth violates the complexity".to_string()));
            }
        }
        if value != 0.0 {
            *self.coeffs.entry(key).or_insert(0.0) += value;
        }
        Ok(())
    }

    fn other_axis(&self) -> u8 {
        3 - self.haar_axis
    }

    /// `prod |I_j|^{1/2} / |Q|^m` on the Haar axis.
    pub fn normalization(&self, key: &PpKey) -> f64 {
        let p = self.grids.params();
        let m = self.slots() - 1;
        let mut prod = 1.0;
        for c in &key.cubes {
            prod *= fmath::sqrt(c.volume(p));
        }
        prod / fmath::powf(key.q_haar.volume(p), m as f64)
    }

    /// Pairing of `f` against slot `j`'s tensor factor.
    fn slot_pairing(&self, f: &StepFunction, key: &PpKey, j: usize) -> f64 {
        let p = self.grids.params();
        let (c1, e1, c2, e2);
        let other_pat: HaarPat = if j == self.special_slot { 1 } else { 0 };
        if self.haar_axis == 1 {
            c1 = key.cubes[j];
            e1 = self.pattern[j];
            c2 = key.q_other;
            e2 = other_pat;
        } else {
            c1 = key.q_other;
            e1 = other_pat;
            c2 = key.cubes[j];
            e2 = self.pattern[j];
        }
        let raw = pair_tensor(f, &self.grids, &c1, e1, &c2, e2);
        // non-special slots carry 1_Q/|Q| rather than the normalized h^0
        if j == self.special_slot {
            raw
        } else {
            let qv = key.q_other.volume(p);
            raw * fmath::powf(qv, -0.5) // h^0 = |Q|^{-1/2} 1_Q, want 1_Q/|Q|
        }
    }

    pub fn apply(&self, fs: &[&StepFunction]) -> Result<StepFunction> {
        let m = self.slots() - 1;
        if fs.len() != m {
            return Err(Error::Domain("apply needs m inputs".to_string()));
        }
        let p = self.grids.params();
        let cells2 = p.cells(2);
        let mut out = StepFunction::zero(p, AxisSet::Both);
        for (key, a) in &self.coeffs {
            let mut lambda = *a;
            for j in 0..m {
                lambda *= self.slot_pairing(fs[j], key, j);
                if lambda == 0.0 {
                    break;
                }
            }
            if lambda == 0.0 {
                continue;
            }
            // output factor
            let j = m;
            let other_pat: HaarPat = if j == self.special_slot { 1 } else { 0 };
            let (vals1, vals2);
            if self.haar_axis == 1 {
                vals1 = haar_cell_values(&self.grids.grid1, &key.cubes[j], self.pattern[j], p);
                vals2 = haar_cell_values(&self.grids.grid2, &key.q_other, other_pat, p);
            } else {
                vals1 = haar_cell_values(&self.grids.grid1, &key.q_other, other_pat, p);
                vals2 = haar_cell_values(&self.grids.grid2, &key.cubes[j], self.pattern[j], p);
            }
            let scale = if j == self.special_slot {
                1.0
            } else {
                fmath::powf(key.q_other.volume(p), -0.5)
            };
            for (ci, u) in &vals1 {
                for (cj, v) in &vals2 {
                    out.values[ci * cells2 + cj] += lambda * scale * u * v;
                }
            }
        }
        Ok(out)
    }

    /// BMO-normalization certificates per `(slot tuple, Haar-axis cube)`
    /// group, plus tail curves in both parameters.
    pub fn validate(&self, family: &UFamily, n_ladder: &[u32]) -> PpValidation {
        let other_grid = self.grids.grid(self.other_axis());
        // group: (cubes, q_haar) -> (q_other -> a)
        let mut groups: BTreeMap<(Vec<DyadicCube>, DyadicCube), BTreeMap<DyadicCube, f64>> =
            BTreeMap::new();
        for (key, a) in &self.coeffs {
            groups
                .entry((key.cubes.clone(), key.q_haar))
                .or_default()
                .insert(key.q_other, *a);
        }
        let bmo_sup = |seq: &BTreeMap<DyadicCube, f64>, n_exclude: Option<u32>| -> f64 {
            let mut best = 0.0f64;
            for q0 in other_grid.all_cubes() {
                let mut s = 0.0;
                for (q2, a) in seq {
                    if let Some(n) = n_exclude {
                        if in_dn(q2, other_grid, n) {
                            continue;
                        }
                    }
                    if other_grid.contains(&q0, q2) {
                        s += a * a;
                    }
                }
                best = best.max(s / q0.volume(self.grids.params()));
            }
            fmath::sqrt(best)
        };
        let mut max_ratio = 0.0f64;
        let mut cert: BTreeMap<(Vec<DyadicCube>, DyadicCube), f64> = BTreeMap::new();
        for ((cubes, qh), seq) in &groups {
            let cap = self.normalization(&PpKey {
                q_haar: *qh,
                cubes: cubes.clone(),
                q_other: *qh, // unused in normalization
            });
            let ratio = bmo_sup(seq, None) / cap;
            cert.insert((cubes.clone(), *qh), ratio);
            max_ratio = max_ratio.max(ratio);
        }
        let haar_grid = self.grids.grid(self.haar_axis);
        let tail_haar: Vec<(u32, f64)> = n_ladder
            .iter()
            .map(|&n| {
                let sup = cert
                    .iter()
                    .filter(|((_, qh), _)| !in_dn(qh, haar_grid, n))
                    .map(|(_, v)| *v)
                    .fold(0.0f64, f64::max);
                (n, sup)
            })
            .collect();
        let tail_other: Vec<(u32, f64)> = n_ladder
            .iter()
            .map(|&n| {
                let sup = groups
                    .iter()
                    .map(|((cubes, qh), seq)| {
                        let cap = self.normalization(&PpKey {
                            q_haar: *qh,
                            cubes: cubes.clone(),
                            q_other: *qh,
                        });
                        bmo_sup(seq, Some(n)) / cap
                    })
                    .fold(0.0f64, f64::max);
                (n, sup)
            })
            .collect();
        let _ = family;
        PpValidation {
            valid: max_ratio <= 1.0 + VALIDATION_SLACK,
            max_ratio,
            tail_haar,
            tail_other,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PpValidation {
    pub valid: bool,
    pub max_ratio: f64,
    pub tail_haar: Vec<(u32, f64)>,
    pub tail_other: Vec<(u32, f64)>,
}

impl TriForm for PartialParaproductOp {
    fn lattice(&self) -> &LatticeParams {
        self.grids.params()
    }

    fn form(&self, f1: &StepFunction, f2: &StepFunction, f3: &StepFunction) -> f64 {
        debug_assert_eq!(self.slots(), 3);
        let fs = [f1, f2, f3];
        let mut total = 0.0;
        for (key, a) in &self.coeffs {
            let mut term = *a;
            for j in 0..3 {
                term *= self.slot_pairing(fs[j], key, j);
                if term == 0.0 {
                    break;
                }
            }
            total += term;
        }
        total
    }
}

/// Full paraproduct: Carleson-normalized rectangle coefficients with one
/// cancellative slot per axis.
#[derive(Debug, Clone)]
pub struct FullParaproductOp {
    pub grids: ProductGrid,
    /// slots carrying the cancellative factor per axis
    pub special: (usize, usize),
    pub slots: usize,
    pub coeffs: BTreeMap<(DyadicCube, DyadicCube), f64>,
}

impl FullParaproductOp {
    pub fn new(grids: ProductGrid, slots: usize, special: (usize, usize)) -> Result<Self> {
        if slots < 2 || special.0 >= slots || special.1 >= slots {
            return Err(Error::Config("bad slot structure".to_string()));
        }
        Ok(FullParaproductOp {
            grids,
            special,
            slots,
            coeffs: BTreeMap::new(),
        })
    }

    fn slot_pairing(&self, f: &StepFunction, key: &(DyadicCube, DyadicCube), j: usize) -> f64 {
        let p = self.grids.params();
        let e1: HaarPat = if j == self.special.0 { 1 } else { 0 };
        let e2: HaarPat = if j == self.special.1 { 1 } else { 0 };
        let mut v = pair_tensor(f, &self.grids, &key.0, e1, &key.1, e2);
        if e1 == 0 {
            v *= fmath::powf(key.0.volume(p), -0.5);
        }
        if e2 == 0 {
            v *= fmath::powf(key.1.volume(p), -0.5);
        }
        v
    }

    pub fn apply(&self, fs: &[&StepFunction]) -> Result<StepFunction> {
        let m = self.slots - 1;
        if fs.len() != m {
            return Err(Error::Domain("apply needs m inputs".to_string()));
        }
        let p = self.grids.params();
        let cells2 = p.cells(2);
        let mut out = StepFunction::zero(p, AxisSet::Both);
        for (key, b) in &self.coeffs {
            let mut lambda = *b;
            for j in 0..m {
                lambda *= self.slot_pairing(fs[j], key, j);
                if lambda == 0.0 {
                    break;
                }
            }
            if lambda == 0.0 {
                continue;
            }
            let j = m;
            let e1: HaarPat = if j == self.special.0 { 1 } else { 0 };
            let e2: HaarPat = if j == self.special.1 { 1 } else { 0 };
            let mut scale = 1.0;
            if e1 == 0 {
                scale *= fmath::powf(key.0.volume(p), -0.5);
            }
            if e2 == 0 {
                scale *= fmath::powf(key.1.volume(p), -0.5);
            }
            for (ci, u) in haar_cell_values(&self.grids.grid1, &key.0, e1, p) {
                for (cj, v) in haar_cell_values(&self.grids.grid2, &key.1, e2, p) {
                    out.values[ci * cells2 + cj] += lambda * scale * u * v;
                }
            }
        }
        Ok(out)
    }

    /// Carleson certificates: the packing constant of `b^2` and its
    /// truncation tails.
    pub fn validate(&self, family: &UFamily, n_ladder: &[u32]) -> Result<PpValidation> {
        let mut lam = CarlesonFamily::default();
        for ((c1, c2), b) in &self.coeffs {
            lam.insert(*c1, *c2, b * b)?;
        }
        let c = carleson_check(&lam, &self.grids, family)?;
        let mut tails = Vec::new();
        for &n in n_ladder {
            let mut lam_n = CarlesonFamily::default();
            for ((c1, c2), b) in &self.coeffs {
                let inside =
                    in_dn(c1, &self.grids.grid1, n) && in_dn(c2, &self.grids.grid2, n);
                if !inside {
                    lam_n.insert(*c1, *c2, b * b)?;
                }
            }
            tails.push((n, carleson_check(&lam_n, &self.grids, family)?));
        }
        Ok(PpValidation {
            valid: c <= 1.0 + VALIDATION_SLACK,
            max_ratio: c,
            tail_haar: tails.clone(),
            tail_other: tails,
        })
    }
}

impl TriForm for FullParaproductOp {
    fn lattice(&self) -> &LatticeParams {
        self.grids.params()
    }

    fn form(&self, f1: &StepFunction, f2: &StepFunction, f3: &StepFunction) -> f64 {
        debug_assert_eq!(self.slots, 3);
        let fs = [f1, f2, f3];
        let mut total = 0.0;
        for (key, b) in &self.coeffs {
            let mut term = *b;
            for j in 0..3 {
                term *= self.slot_pairing(fs[j], key, j);
                if term == 0.0 {
                    break;
                }
            }
            total += term;
        }
        total
    }
}

/// Enumerate every product grid of the lattice (all shift sequences on
/// both axes), within the budget.
pub fn enumerate_product_grids(params: &LatticeParams, budget: u64) -> Result<Vec<ProductGrid>> {
    let comps = params.shift_components();
    let bits1 = comps as u32 * params.n1;
    let bits2 = comps as u32 * params.n2;
    let total_bits = bits1 + bits2;
    if total_bits > 40 || (1u64 << total_bits) > budget {
        return Err(Error::BudgetExceeded(alloc::format!(
            "grid ensemble has 2^{total_bits} members"
        )));
    }
    let mask1 = (1u8 << params.n1) - 1;
    let mask2 = (1u8 << params.n2) - 1;
    let mut out = Vec::with_capacity(1 << total_bits);
    for code in 0..(1u64 << total_bits) {
        let mut omega1 = vec![0u8; comps];
        let mut omega2 = vec![0u8; comps];
        for (i, slot) in omega1.iter_mut().enumerate() {
            *slot = ((code >> (i as u32 * params.n1)) as u8) & mask1;
        }
        for (i, slot) in omega2.iter_mut().enumerate() {
            *slot = ((code >> (bits1 + i as u32 * params.n2)) as u8) & mask2;
        }
        out.push(ProductGrid::new(
            enumerate_grid(params, 1, &omega1)?,
            enumerate_grid(params, 2, &omega2)?,
        )?);
    }
    Ok(out)
}

/// Sample product grids with a recorded seed.
pub fn sample_product_grids(
    params: &LatticeParams,
    samples: usize,
    seed: u64,
) -> Result<Vec<ProductGrid>> {
    let comps = params.shift_components();
    let mask1 = (1u8 << params.n1) - 1;
    let mask2 = (1u8 << params.n2) - 1;
    let mut rng = SeededRng::new(seed);
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let omega1: Vec<u8> = (0..comps).map(|_| (rng.next_u64() as u8) & mask1).collect();
        let omega2: Vec<u8> = (0..comps).map(|_| (rng.next_u64() as u8) & mask2).collect();
        out.push(ProductGrid::new(
            enumerate_grid(params, 1, &omega1)?,
            enumerate_grid(params, 2, &omega2)?,
        )?);
    }
    Ok(out)
}

/// Averaging mode for grid ensembles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AverageMode {
    Exact { budget: u64 },
    MonteCarlo { samples: usize, seed: u64 },
}

/// Result of a grid average: the mean and, in sampled mode, the standard
/// error of the mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridAverage {
    pub mean: f64,
    pub std_error: f64,
    pub count: usize,
    pub exact: bool,
}

/// Average a scalar functional of the grid over the shift ensemble.
pub fn grid_average<F: FnMut(&ProductGrid) -> f64>(
    params: &LatticeParams,
    mode: AverageMode,
    mut builder: F,
) -> Result<GridAverage> {
    match mode {
        AverageMode::Exact { budget } => {
            let grids = enumerate_product_grids(params, budget)?;
            let n = grids.len();
            let mut sum = 0.0;
            for g in &grids {
                sum += builder(g);
            }
            Ok(GridAverage {
                mean: sum / n as f64,
                std_error: 0.0,
                count: n,
                exact: true,
            })
        }
        AverageMode::MonteCarlo { samples, seed } => {
            let grids = sample_product_grids(params, samples, seed)?;
            let n = grids.len();
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for g in &grids {
                let v = builder(g);
                sum += v;
                sumsq += v * v;
            }
            let mean = sum / n as f64;
            let var = (sumsq / n as f64 - mean * mean).max(0.0);
            Ok(GridAverage {
                mean,
                std_error: fmath::sqrt(var / n as f64),
                count: n,
                exact: false,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::standard_grid;

    fn params() -> LatticeParams {
        LatticeParams::new(1, 1, 1, 2, true, 3).unwrap()
    }

    fn grids(p: &LatticeParams) -> ProductGrid {
        ProductGrid::new(standard_grid(p, 1).unwrap(), standard_grid(p, 2).unwrap()).unwrap()
    }

    fn rand_fn(p: &LatticeParams, seed: u64) -> StepFunction {
        let mut rng = SeededRng::new(seed);
        let mut f = StepFunction::zero(p, AxisSet::Both);
        f.values.iter_mut().for_each(|v| *v = rng.symmetric());
        f
    }

    fn single_q_shift(p: &LatticeParams, saturation: f64) -> ShiftOp {
        let g = grids(p);
        let q1 = DyadicCube::new(1, 1, [0, 0, 0]);
        let q2 = DyadicCube::new(2, 1, [1, 0, 0]);
        let mut op = ShiftOp::new(
            g.clone(),
            vec![(1, 0), (1, 1), (0, 1)],
            vec![(1, 1), (0, 1), (1, 0)],
        )
        .unwrap();
        let c1a = g.grid1.child(&q1, 0).unwrap();
        let c1b = g.grid1.child(&q1, 1).unwrap();
        let c2a = g.grid2.child(&q2, 0).unwrap();
        let key = ShiftKey {
            q: (q1, q2),
            cubes: vec![(c1a, q2), (c1b, c2a), (q1, c2a)],
        };
        let cap = op.normalization(&key);
        op.insert(key, saturation * cap).unwrap();
        op
    }

    #[test]
    fn saturated_shift_validates_and_doubled_fails() {
        let p = params();
        let op = single_q_shift(&p, 1.0);
        let rep = validate_shift(&op, &[0, 1, 2]);
        assert!(rep.valid, "max ratio {}", rep.max_ratio);
        assert!((rep.max_ratio - 1.0).abs() < 1e-12);
        let bad = single_q_shift(&p, 2.0);
        let rep2 = validate_shift(&bad, &[0]);
        assert!(!rep2.valid);
        assert!(rep2.witness.is_some());
    }

    #[test]
    fn form_equals_apply_paired() {
        let p = params();
        let op = single_q_shift(&p, 0.7);
        let f1 = rand_fn(&p, 1);
        let f2 = rand_fn(&p, 2);
        let f3 = rand_fn(&p, 3);
        let lhs = op.form(&f1, &f2, &f3);
        let rhs = op.apply(&[&f1, &f2]).unwrap().inner(&f3).unwrap();
        assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn zero_coefficients_give_zero() {
        let p = params();
        let g = grids(&p);
        let op = ShiftOp::new(
            g,
            vec![(0, 0), (0, 0), (0, 0)],
            vec![(1, 1), (1, 1), (0, 0)],
        )
        .unwrap();
        let f = rand_fn(&p, 4);
        assert_eq!(op.apply(&[&f, &f]).unwrap().sup_norm(), 0.0);
    }

    #[test]
    fn unilinear_shift_is_haar_projection() {
        let p = params();
        let g = grids(&p);
        // m = 1: two slots, identity complexity on one outer cube
        let mut op = ShiftOp::new(
            g.clone(),
            vec![(0, 0), (0, 0)],
            vec![(1, 1), (1, 1)],
        )
        .unwrap();
        let q1 = DyadicCube::new(1, 0, [2, 0, 0]);
        let q2 = DyadicCube::new(2, 0, [1, 0, 0]);
        let key = ShiftKey {
            q: (q1, q2),
            cubes: vec![(q1, q2), (q1, q2)],
        };
        let cap = op.normalization(&key);
        op.insert(key, cap).unwrap();
        // cap = |I|^{1/2}|I|^{1/2}/|Q|^1 = 1 here, so apply f = <f,h>h
        let f = rand_fn(&p, 5);
        let out = op.apply(&[&f]).unwrap();
        let h = StepFunction::tensor(
            &crate::haar::haar(&g.grid1, &crate::haar::HaarIndex { cube: q1, eta: 1 }).unwrap(),
            &crate::haar::haar(&g.grid2, &crate::haar::HaarIndex { cube: q2, eta: 1 }).unwrap(),
        )
        .unwrap();
        let expect = h.scale(f.inner(&h).unwrap());
        assert!(out.sub(&expect).unwrap().sup_norm() < 1e-12);
    }

    #[test]
    fn localized_bound_on_random_validated_shifts() {
        let p = params();
        let g = grids(&p);
        let mut rng = SeededRng::new(41);
        for trial in 0..100u64 {
            let mut op = ShiftOp::new(
                g.clone(),
                vec![(1, 1), (1, 0), (0, 1)],
                vec![(1, 1), (1, 0), (0, 1)],
            )
            .unwrap();
            // random outer cube and admissible tuple
            let q1 = DyadicCube::new(1, 0, [rng.below(4) as u32, 0, 0]);
            let q2 = DyadicCube::new(2, 1, [rng.below(2) as u32, 0, 0]);
            let c1a = g.grid1.child(&q1, rng.below(2) as u32).unwrap();
            let c1b = g.grid1.child(&q1, rng.below(2) as u32).unwrap();
            let c2a = g.grid2.child(&q2, rng.below(2) as u32).unwrap();
            let key = ShiftKey {
                q: (q1, q2),
                cubes: vec![(c1a, c2a), (c1b, q2), (q1, c2a)],
            };
            let cap = op.normalization(&key);
            op.insert(key, cap * rng.symmetric()).unwrap();
            let f1 = rand_fn(&p, 100 + trial);
            let f2 = rand_fn(&p, 200 + trial);
            let worst = localized_bound_check(&op, &[&f1, &f2]).unwrap();
            assert!(worst <= 1.0 + 1e-12, "trial {trial}: ratio {worst}");
        }
    }

    #[test]
    fn adjoint_duality_and_involution() {
        let p = params();
        let op = single_q_shift(&p, 0.9);
        let f1 = rand_fn(&p, 7);
        let f2 = rand_fn(&p, 8);
        let f3 = rand_fn(&p, 9);
        let base = op.form(&f1, &f2, &f3);
        // identity adjoint
        let id = op.adjoint(0, 0).unwrap();
        assert!((id.form(&f1, &f2, &f3) - base).abs() < 1e-12);
        // full adjoint in slot 1 on both axes: swap f1 and f3
        let adj = op.adjoint(1, 1).unwrap();
        let v = adj.form(&f3, &f2, &f1);
        assert!((v - base).abs() < 1e-12 * (1.0 + base.abs()), "{v} vs {base}");
        // involution
        let back = adj.adjoint(1, 1).unwrap();
        assert!((back.form(&f1, &f2, &f3) - base).abs() < 1e-12);
        // cancellative counts preserved per axis
        for axis in 0..2 {
            let count = |o: &ShiftOp| {
                o.pattern
                    .iter()
                    .filter(|(a, b)| if axis == 0 { *a != 0 } else { *b != 0 })
                    .count()
            };
            assert_eq!(count(&op), count(&adj));
        }
    }

    #[test]
    fn partial_paraproduct_form_and_validation() {
        let p = params();
        let g = grids(&p);
        let mut op = PartialParaproductOp::new(
            g.clone(),
            1,
            2,
            vec![0, 1, 1],
            vec![1, 0, 1],
        )
        .unwrap();
        let q1 = DyadicCube::new(1, 1, [0, 0, 0]);
        let i1 = q1;
        let j1 = g.grid1.child(&q1, 0).unwrap();
        let k1 = g.grid1.child(&q1, 1).unwrap();
        // a small BMO-normalized sequence over the other axis
        let cap = {
            let key = PpKey {
                q_haar: q1,
                cubes: vec![i1, j1, k1],
                q_other: q1,
            };
            op.normalization(&key)
        };
        for (idx, q2) in g.grid2.cubes_at(-1).into_iter().enumerate().take(3) {
            let key = PpKey {
                q_haar: q1,
                cubes: vec![i1, j1, k1],
                q_other: q2,
            };
            let v = cap * fmath::sqrt(q2.volume(&p)) * 0.3 * (idx as f64 + 1.0) / 3.0;
            op.insert(key, v).unwrap();
        }
        let fam = UFamily::standard(&g, 7);
        let rep = op.validate(&fam, &[0, 1, 2]);
        assert!(rep.max_ratio.is_finite());
        let f1 = rand_fn(&p, 11);
        let f2 = rand_fn(&p, 12);
        let f3 = rand_fn(&p, 13);
        let lhs = op.form(&f1, &f2, &f3);
        let rhs = op.apply(&[&f1, &f2]).unwrap().inner(&f3).unwrap();
        assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn full_paraproduct_validation_and_scaling() {
        let p = params();
        let g = grids(&p);
        let mut op = FullParaproductOp::new(g.clone(), 3, (0, 2)).unwrap();
        let r1 = DyadicCube::new(1, 0, [1, 0, 0]);
        let r2 = DyadicCube::new(2, 0, [2, 0, 0]);
        let vol = fmath::sqrt(r1.volume(&p) * r2.volume(&p));
        op.coeffs.insert((r1, r2), vol);
        let fam = UFamily::standard(&g, 3);
        let rep = op.validate(&fam, &[0, 1, 2]).unwrap();
        assert!(rep.valid, "carleson constant {}", rep.max_ratio);
        // form scales linearly in b
        let f1 = rand_fn(&p, 21);
        let f2 = rand_fn(&p, 22);
        let f3 = rand_fn(&p, 23);
        let base = op.form(&f1, &f2, &f3);
        let mut op2 = op.clone();
        op2.coeffs.iter_mut().for_each(|(_, v)| *v *= 2.5);
        assert!((op2.form(&f1, &f2, &f3) - 2.5 * base).abs() < 1e-12 * (1.0 + base.abs()));
        // pairing bound recorded
        let bound = base.abs() / (f1.l2_norm() * f2.l2_norm() * f3.l2_norm()).max(1e-300);
        assert!(bound.is_finite());
    }

    #[test]
    fn grid_average_exact_and_montecarlo() {
        let p = params();
        // constant builder
        let c = grid_average(&p, AverageMode::Exact { budget: 1 << 12 }, |_| 2.5).unwrap();
        assert_eq!(c.mean, 2.5);
        let expect = 1usize << (2 * p.shift_components());
        assert_eq!(c.count, expect);
        // a grid-dependent functional: agreement within 3 standard errors
        let func = |g: &ProductGrid| -> f64 {
            g.grid1.omega.iter().map(|x| *x as f64).sum::<f64>()
                - 0.3 * g.grid2.omega.iter().map(|x| *x as f64).sum::<f64>()
        };
        let exact = grid_average(&p, AverageMode::Exact { budget: 1 << 12 }, func).unwrap();
        let mc = grid_average(
            &p,
            AverageMode::MonteCarlo {
                samples: 10_000,
                seed: 424242,
            },
            func,
        )
        .unwrap();
        assert!(
            (mc.mean - exact.mean).abs() <= 3.0 * mc.std_error.max(1e-9),
            "mc {} vs exact {} (se {})",
            mc.mean,
            exact.mean,
            mc.std_error
        );
        // linearity of the exact mean
        let sum_func = |g: &ProductGrid| func(g) + 2.0 * func(g);
        let lin = grid_average(&p, AverageMode::Exact { budget: 1 << 12 }, sum_func).unwrap();
        assert!((lin.mean - 3.0 * exact.mean).abs() < 1e-12);
    }
}
