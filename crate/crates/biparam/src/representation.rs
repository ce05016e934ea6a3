//! The representation engine: decompose a discrete bilinear bi-parameter
//! operator into an exact average, over the shift ensemble, of dyadic
//! shifts, partial paraproducts, and full paraproducts.
//!
//! The pipeline per product grid:
//!
//! 1. Expand all three slots in double martingale differences; for
//!    per-axis mean-adjusted inputs the expansion is exact on the torus.
//! 2. Split per axis into three blocks by which slot carries the smallest
//!    cube, then per block into a staggered branch (cancellative cube one
//!    scale above the averaged cube) and an aligned branch (equal
//!    scales). The two branches together are an exact rearrangement of
//!    the block.
//! 3. Classify each per-axis triple as separated, adjacent, or nested.
//!    Separated and adjacent triples feed shift coefficients on the
//!    smallest common ancestor. A nested triple splits three ways; the
//!    all-averages pieces of the two branches pair through the
//!    parent-child telescoping identity and collapse into a paraproduct
//!    coefficient indexed by the smallest cube, while the two correction
//!    pieces feed shifts on the parent.
//! 4. Restrict the smallest cubes to good cubes, weighted by the exact
//!    per-scale inverse goodness probabilities; averaging the restricted
//!    sums over the full shift ensemble reproduces the original form.
//!
//! Coefficients are streamed, never stored: one pass per grid collects
//! normalization certificates, truncation tail curves, the case census,
//! and the bundle form values on the supplied test tuples. A bundle is
//! its configuration plus the tuned constant; evaluating it re-runs the
//! deterministic stream.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::haar::{haar, HaarIndex};
use crate::kernels::{KernelOp, TriForm};
use crate::lattice::{
    in_dn, pi_good_table, DyadicCube, LatticeParams, PiGood, ProductGrid, ShiftedGrid, MAX_DIM,
};
use crate::modelops::{enumerate_product_grids, haar_cell_values, FullParaproductOp, ShiftOp};
use crate::step::{cube_cells, StepFunction};
use crate::Rational;

/// Which slot of the trilinear form carries the smallest cube on an axis.
pub type Role = usize;

/// Per-axis case of a template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum AxisCase {
    Separated,
    Adjacent,
    /// correction pieces of a nested triple (shift-type)
    NestedShift,
    /// the collapsed all-averages piece of the nested chains
    Collapsed,
}

impl AxisCase {
    pub fn label(&self) -> &'static str {
        match self {
            AxisCase::Separated => "S",
            AxisCase::Adjacent => "A",
            AxisCase::NestedShift => "N",
            AxisCase::Collapsed => "P",
        }
    }
}

/// Distinct f-pairing factor: a cube with an average or cancellative tag.
type FactorKey = (DyadicCube, u8);

/// One per-axis template: everything needed to produce bi-parameter
/// coefficients when tensored with a template of the other axis.
#[derive(Debug, Clone)]
struct AxisTemplate {
    role: Role,
    case: AxisCase,
    /// f-pairing factor ids per slot
    fpair: [u32; 3],
    /// T-argument ids per slot
    arg: [u32; 3],
    /// scalar prefactor including the inverse goodness weight
    pref: f64,
    /// outer cube of the stored coefficient on this axis
    q: DyadicCube,
    /// depth of the smallest cube below `q` (weight exponent)
    k_depth: u32,
    /// stored slot patterns (0 average, 1 cancellative), for reports
    #[allow(dead_code)]
    slot_pat: [u8; 3],
    /// the smallest (good) cube
    k_cube: DyadicCube,
    /// product of |slot cube|^{1/2} for the shift normalization cap
    half_vols: f64,
}

/// One materialized T-argument on the axis cells.
struct ArgVec {
    values: Vec<f64>,
}

/// Per-axis-grid stream: factor tables, argument vectors, templates, and
/// the raw-triple census per role and case.
pub struct AxisStream {
    pub grid: ShiftedGrid,
    factors: Vec<FactorKey>,
    args: Vec<ArgVec>,
    templates: Vec<AxisTemplate>,
    pub census: BTreeMap<(Role, &'static str), u64>,
    pub raw_triples: u64,
}

fn factor_id(map: &mut BTreeMap<FactorKey, u32>, list: &mut Vec<FactorKey>, key: FactorKey) -> u32 {
    if let Some(i) = map.get(&key) {
        return *i;
    }
    let id = list.len() as u32;
    list.push(key);
    map.insert(key, id);
    id
}

enum ArgKind {
    /// L2-normalized Haar-type factor of a cube
    Normalized(DyadicCube, u8),
    /// the constant one on the axis
    One,
    /// raw indicator of a cube
    Indicator(DyadicCube),
    /// raw indicator of the complement of a cube
    Complement(DyadicCube),
    /// `1_{V^c} (h_C - <h_C>_V)` for a child `V` of `C`
    Phi { parent: DyadicCube, child: DyadicCube },
}

struct ArgBuilder<'g> {
    grid: &'g ShiftedGrid,
    map: BTreeMap<(u8, DyadicCube, DyadicCube), u32>,
    list: Vec<ArgVec>,
}

impl<'g> ArgBuilder<'g> {
    fn new(grid: &'g ShiftedGrid) -> Self {
        ArgBuilder {
            grid,
            map: BTreeMap::new(),
            list: Vec::new(),
        }
    }

    fn materialize(&self, kind: &ArgKind) -> Vec<f64> {
        let p = &self.grid.params;
        let cells = p.cells(self.grid.axis);
        let mut v = vec![0.0; cells];
        match kind {
            ArgKind::Normalized(c, e) => {
                for (i, val) in haar_cell_values(self.grid, c, *e, p) {
                    v[i] = val;
                }
            }
            ArgKind::One => v.iter_mut().for_each(|x| *x = 1.0),
            ArgKind::Indicator(c) => {
                for i in cube_cells(self.grid, c) {
                    v[i] = 1.0;
                }
            }
            ArgKind::Complement(c) => {
                v.iter_mut().for_each(|x| *x = 1.0);
                for i in cube_cells(self.grid, c) {
                    v[i] = 0.0;
                }
            }
            ArgKind::Phi { parent, child } => {
                // h_C - <h_C>_V on the whole complement of the child: the
                // subtraction persists outside the parent, where h_C = 0
                let mut hv = vec![0.0; cells];
                for (i, val) in haar_cell_values(self.grid, parent, 1, p) {
                    hv[i] = val;
                }
                let avg = haar_avg_on_child(self.grid, parent, child);
                for (i, slot) in v.iter_mut().enumerate() {
                    *slot = hv[i] - avg;
                }
                for i in cube_cells(self.grid, child) {
                    v[i] = 0.0;
                }
            }
        }
        v
    }

    fn id(&mut self, kind: ArgKind) -> u32 {
        let top = top_cube(self.grid);
        let key = match &kind {
            ArgKind::Normalized(c, e) => (*e, *c, *c),
            ArgKind::One => (10, top, top),
            ArgKind::Indicator(c) => (11, *c, *c),
            ArgKind::Complement(c) => (12, *c, *c),
            ArgKind::Phi { parent, child } => (13, *parent, *child),
        };
        if let Some(i) = self.map.get(&key) {
            return *i;
        }
        let id = self.list.len() as u32;
        let values = self.materialize(&kind);
        self.list.push(ArgVec { values });
        self.map.insert(key, id);
        id
    }
}

fn top_cube(grid: &ShiftedGrid) -> DyadicCube {
    DyadicCube::new(grid.axis, grid.params.top_exp(), [0; MAX_DIM])
}

/// Value of the parent's Haar function on one of its children.
fn haar_avg_on_child(grid: &ShiftedGrid, parent: &DyadicCube, child: &DyadicCube) -> f64 {
    let p = &grid.params;
    let hv = haar_cell_values(grid, parent, 1, p);
    let cell = cube_cells(grid, child)[0];
    hv.iter()
        .find(|(i, _)| *i == cell)
        .map(|(_, v)| *v)
        .unwrap_or(0.0)
}

/// Smallest grid cube containing all of the given cubes.
fn ancestor(grid: &ShiftedGrid, cubes: &[&DyadicCube]) -> Option<DyadicCube> {
    let p = &grid.params;
    let start = cubes.iter().map(|c| c.scale_exp).max().unwrap();
    for k in start..=p.top_exp() {
        let mut units = [0i64; MAX_DIM];
        for d in 0..grid.dim() as usize {
            units[d] = grid.left_units(cubes[0], d);
        }
        let cand = grid.cube_containing_units(k, &units[..grid.dim() as usize]);
        if cubes.iter().all(|c| grid.contains(&cand, c)) {
            return Some(cand);
        }
    }
    None
}

impl AxisStream {
    /// Build the stream for one axis grid with the per-scale inverse
    /// goodness weights.
    pub fn build(grid: &ShiftedGrid, inv_pi: &BTreeMap<i32, f64>) -> Result<AxisStream> {
        let p = &grid.params;
        if p.dim(grid.axis) != 1 {
            return Err(Error::Config(
                "the representation engine runs at one dimension per parameter".to_string(),
            ));
        }
        if !p.periodic {
            return Err(Error::Config(
                "the representation engine runs on the torus".to_string(),
            ));
        }
        let gamma = p.gamma(grid.axis);
        let cell = p.cell_side();
        let mut fmap: BTreeMap<FactorKey, u32> = BTreeMap::new();
        let mut factors: Vec<FactorKey> = Vec::new();
        let mut args = ArgBuilder::new(grid);
        let mut templates = Vec::new();
        let mut census: BTreeMap<(Role, &'static str), u64> = BTreeMap::new();
        let mut raw_triples = 0u64;

        let mut good: BTreeMap<DyadicCube, bool> = BTreeMap::new();
        for k in (p.finest_exp() + 1)..=p.top_exp() {
            for c in grid.cubes_at(k) {
                good.insert(c, crate::lattice::is_good(&c, grid)?);
            }
        }
        let half_vol = |c: &DyadicCube| fmath::sqrt(c.volume(p));

        for role in 0..3usize {
            let g1 = (role + 1) % 3; // cancellative in the staggered branch
            let g2 = (role + 2) % 3; // averaged in the staggered branch
            let (strict_x, strict_y) = match role {
                2 => (0, 0),
                1 => (1, 0),
                _ => (1, 1),
            };
            for kk in (p.finest_exp() + 1)..=p.top_exp() {
                for k_cube in grid.cubes_at(kk) {
                    if !good[&k_cube] {
                        continue;
                    }
                    let invp = inv_pi[&kk];
                    let fk = factor_id(&mut fmap, &mut factors, (k_cube, 1));
                    let arg_k = args.id(ArgKind::Normalized(k_cube, 1));

                    // staggered branch: cancellative at s, averaged at s-1
                    for s in (kk + strict_x)..=p.top_exp() {
                        for c_cube in grid.cubes_at(s) {
                            for v_cube in grid.cubes_at(s - 1) {
                                raw_triples += 1;
                                let dkc = grid.distance_units(&k_cube, &c_cube) as f64 * cell;
                                let dkv = grid.distance_units(&k_cube, &v_cube) as f64 * cell;
                                let thr = 2.0
                                    * fmath::powf(k_cube.side(), gamma)
                                    * fmath::powf(v_cube.side(), 1.0 - gamma);
                                let nested = grid.contains(&v_cube, &k_cube)
                                    && grid.contains(&c_cube, &v_cube);
                                let case = if dkc.max(dkv) > thr {
                                    AxisCase::Separated
                                } else if nested {
                                    AxisCase::NestedShift
                                } else {
                                    AxisCase::Adjacent
                                };
                                *census.entry((role, case.label())).or_insert(0) += 1;
                                let fc = factor_id(&mut fmap, &mut factors, (c_cube, 1));
                                let fv = factor_id(&mut fmap, &mut factors, (v_cube, 0));
                                let mut fpair = [0u32; 3];
                                fpair[g1] = fc;
                                fpair[g2] = fv;
                                fpair[role] = fk;
                                let mut slot_pat = [0u8; 3];
                                slot_pat[g1] = 1;
                                slot_pat[role] = 1;
                                let hv = half_vol(&c_cube) * half_vol(&v_cube) * half_vol(&k_cube);
                                if case != AxisCase::NestedShift {
                                    let q = ancestor(grid, &[&c_cube, &v_cube, &k_cube])
                                        .ok_or_else(|| {
                                            Error::Domain("no common ancestor".to_string())
                                        })?;
                                    let mut arg = [0u32; 3];
                                    arg[g1] = args.id(ArgKind::Normalized(c_cube, 1));
                                    arg[g2] = args.id(ArgKind::Normalized(v_cube, 0));
                                    arg[role] = arg_k;
                                    templates.push(AxisTemplate {
                                        role,
                                        case,
                                        fpair,
                                        arg,
                                        pref: invp,
                                        q,
                                        k_depth: (q.scale_exp - kk) as u32,
                                        slot_pat,
                                        k_cube,
                                        half_vols: hv,
                                    });
                                } else {
                                    // nested: C = parent(V), K inside V
                                    let q = c_cube;
                                    let h_on_v = haar_avg_on_child(grid, &c_cube, &v_cube);
                                    let vnorm = fmath::powf(v_cube.volume(p), -0.5);
                                    let base = AxisTemplate {
                                        role,
                                        case,
                                        fpair,
                                        arg: [0; 3],
                                        pref: 0.0,
                                        q,
                                        k_depth: (q.scale_exp - kk) as u32,
                                        slot_pat,
                                        k_cube,
                                        half_vols: hv,
                                    };
                                    let mut t2 = base.clone();
                                    t2.arg[g1] = args.id(ArgKind::One);
                                    t2.arg[g2] = args.id(ArgKind::Complement(v_cube));
                                    t2.arg[role] = arg_k;
                                    t2.pref = -h_on_v * vnorm * invp;
                                    templates.push(t2);
                                    let mut t3 = base.clone();
                                    t3.arg[g1] = args.id(ArgKind::Phi {
                                        parent: c_cube,
                                        child: v_cube,
                                    });
                                    t3.arg[g2] = args.id(ArgKind::Indicator(v_cube));
                                    t3.arg[role] = arg_k;
                                    t3.pref = vnorm * invp;
                                    templates.push(t3);
                                }
                            }
                        }
                    }

                    // aligned branch: averaged and cancellative at equal scales
                    for s in (kk + strict_y)..=p.top_exp() {
                        for a_cube in grid.cubes_at(s) {
                            for b_cube in grid.cubes_at(s) {
                                raw_triples += 1;
                                let nested = a_cube == b_cube
                                    && a_cube.scale_exp > kk
                                    && grid.contains(&a_cube, &k_cube);
                                let dka = grid.distance_units(&k_cube, &a_cube) as f64 * cell;
                                let dkb = grid.distance_units(&k_cube, &b_cube) as f64 * cell;
                                let thr = 2.0
                                    * fmath::powf(k_cube.side(), gamma)
                                    * fmath::powf(b_cube.side(), 1.0 - gamma);
                                let case = if nested {
                                    AxisCase::NestedShift
                                } else if dka.max(dkb) > thr {
                                    AxisCase::Separated
                                } else {
                                    AxisCase::Adjacent
                                };
                                *census.entry((role, case.label())).or_insert(0) += 1;
                                let fa = factor_id(&mut fmap, &mut factors, (a_cube, 0));
                                let fb = factor_id(&mut fmap, &mut factors, (b_cube, 1));
                                let mut fpair = [0u32; 3];
                                fpair[g1] = fa;
                                fpair[g2] = fb;
                                fpair[role] = fk;
                                let mut slot_pat = [0u8; 3];
                                slot_pat[g2] = 1;
                                slot_pat[role] = 1;
                                let hv = half_vol(&a_cube) * half_vol(&b_cube) * half_vol(&k_cube);
                                if case != AxisCase::NestedShift {
                                    let q = ancestor(grid, &[&a_cube, &b_cube, &k_cube])
                                        .ok_or_else(|| {
                                            Error::Domain("no common ancestor".to_string())
                                        })?;
                                    let mut arg = [0u32; 3];
                                    arg[g1] = args.id(ArgKind::Normalized(a_cube, 0));
                                    arg[g2] = args.id(ArgKind::Normalized(b_cube, 1));
                                    arg[role] = arg_k;
                                    templates.push(AxisTemplate {
                                        role,
                                        case,
                                        fpair,
                                        arg,
                                        pref: invp,
                                        q,
                                        k_depth: (q.scale_exp - kk) as u32,
                                        slot_pat,
                                        k_cube,
                                        half_vols: hv,
                                    });
                                } else {
                                    let pcube = a_cube;
                                    let mut units = [0i64; MAX_DIM];
                                    units[0] = grid.left_units(&k_cube, 0);
                                    let w_child =
                                        grid.cube_containing_units(pcube.scale_exp - 1, &units[..1]);
                                    let h_on_w = haar_avg_on_child(grid, &pcube, &w_child);
                                    let pnorm = fmath::powf(pcube.volume(p), -0.5);
                                    let base = AxisTemplate {
                                        role,
                                        case,
                                        fpair,
                                        arg: [0; 3],
                                        pref: 0.0,
                                        q: pcube,
                                        k_depth: (pcube.scale_exp - kk) as u32,
                                        slot_pat,
                                        k_cube,
                                        half_vols: hv,
                                    };
                                    let mut t2 = base.clone();
                                    t2.arg[g1] = args.id(ArgKind::Complement(pcube));
                                    t2.arg[g2] = args.id(ArgKind::One);
                                    t2.arg[role] = arg_k;
                                    t2.pref = -h_on_w * pnorm * invp;
                                    templates.push(t2);
                                    let mut t3 = base.clone();
                                    t3.arg[g1] = args.id(ArgKind::Indicator(pcube));
                                    t3.arg[g2] = args.id(ArgKind::Phi {
                                        parent: pcube,
                                        child: w_child,
                                    });
                                    t3.arg[role] = arg_k;
                                    t3.pref = pnorm * invp;
                                    templates.push(t3);
                                }
                            }
                        }
                    }

                    // collapsed all-averages piece of the nested chains
                    if kk < p.top_exp() {
                        let f_avg = factor_id(&mut fmap, &mut factors, (k_cube, 0));
                        let mut fpair = [0u32; 3];
                        fpair[g1] = f_avg;
                        fpair[g2] = f_avg;
                        fpair[role] = fk;
                        let mut slot_pat = [0u8; 3];
                        slot_pat[role] = 1;
                        let one = args.id(ArgKind::One);
                        let mut arg = [0u32; 3];
                        arg[g1] = one;
                        arg[g2] = one;
                        arg[role] = arg_k;
                        templates.push(AxisTemplate {
                            role,
                            case: AxisCase::Collapsed,
                            fpair,
                            arg,
                            pref: invp / k_cube.volume(p),
                            q: k_cube,
                            k_depth: 0,
                            slot_pat,
                            k_cube,
                            half_vols: half_vol(&k_cube),
                        });
                    }
                }
            }
        }
        Ok(AxisStream {
            grid: grid.clone(),
            factors,
            args: args.list,
            templates,
            census,
            raw_triples,
        })
    }

    pub fn template_count(&self) -> usize {
        self.templates.len()
    }
}

/// Operators the engine can decompose, with per-variant fast pairings.
pub enum EngineOp<'a> {
    Kernel(&'a KernelOp),
    /// a finite sum of dyadic shifts (construct-then-decompose input)
    Shifts(&'a [ShiftOp]),
    /// a sum of shifts and full paraproducts
    Model(&'a [ShiftOp], &'a [FullParaproductOp]),
}

impl<'a> EngineOp<'a> {
    pub fn form(&self, f1: &StepFunction, f2: &StepFunction, f3: &StepFunction) -> f64 {
        match self {
            EngineOp::Kernel(k) => k.form(f1, f2, f3),
            EngineOp::Shifts(ops) => ops.iter().map(|o| o.form(f1, f2, f3)).sum(),
            EngineOp::Model(shifts, pps) => {
                shifts.iter().map(|o| o.form(f1, f2, f3)).sum::<f64>()
                    + pps.iter().map(|o| o.form(f1, f2, f3)).sum::<f64>()
            }
        }
    }
}

/// Per-axis operator pairings: a scalar per template for product kernels,
/// a rank-one factor per operator coefficient for shift sums.
enum AxisPairings {
    Scalar(Vec<f64>),
    Rank {
        /// `weights[c * n_templates + t]`
        weights: Vec<f64>,
        coeffs: Vec<f64>,
        n_templates: usize,
    },
}

impl AxisPairings {
    fn rank(&self) -> usize {
        match self {
            AxisPairings::Scalar(_) => 1,
            AxisPairings::Rank { coeffs, .. } => coeffs.len(),
        }
    }

    /// weight of template `t` in rank component `c` (the scalar variant
    /// has a single component carrying the full pairing)
    fn weight(&self, c: usize, t: usize) -> f64 {
        match self {
            AxisPairings::Scalar(v) => v[t],
            AxisPairings::Rank {
                weights,
                n_templates,
                ..
            } => weights[c * n_templates + t],
        }
    }

    fn coeff(&self, c: usize) -> f64 {
        match self {
            AxisPairings::Scalar(_) => 1.0,
            AxisPairings::Rank { coeffs, .. } => coeffs[c],
        }
    }
}

fn build_pairings(op: &EngineOp, stream: &AxisStream, axis: u8) -> AxisPairings {
    let p = &stream.grid.params;
    let vol = p.cell_vol(axis);
    match op {
        EngineOp::Kernel(k) => {
            let table = if axis == 1 { &k.table1 } else { &k.table2 };
            AxisPairings::Scalar(
                stream
                    .templates
                    .iter()
                    .map(|t| {
                        table.pair(
                            vol,
                            &stream.args[t.arg[0] as usize].values,
                            &stream.args[t.arg[1] as usize].values,
                            &stream.args[t.arg[2] as usize].values,
                        )
                    })
                    .collect(),
            )
        }
        EngineOp::Shifts(ops) | EngineOp::Model(ops, _) => {
            let mut coeff_list: Vec<(f64, [Vec<f64>; 3])> = Vec::new();
            for o in ops.iter() {
                for (key, a) in &o.coeffs {
                    let mut slot_vecs: [Vec<f64>; 3] = [vec![], vec![], vec![]];
                    for j in 0..3 {
                        let (c1, c2) = &key.cubes[j];
                        let (e1, e2) = o.pattern[j];
                        let (cube, eta, grid) = if axis == 1 {
                            (c1, e1, &o.grids.grid1)
                        } else {
                            (c2, e2, &o.grids.grid2)
                        };
                        let mut v = vec![0.0; p.cells(axis)];
                        for (i, val) in haar_cell_values(grid, cube, eta, p) {
                            v[i] = val;
                        }
                        slot_vecs[j] = v;
                    }
                    coeff_list.push((*a, slot_vecs));
                }
            }
            if let EngineOp::Model(_, pps) = op {
                for o in pps.iter() {
                    for ((c1, c2), b) in &o.coeffs {
                        let mut slot_vecs: [Vec<f64>; 3] = [vec![], vec![], vec![]];
                        for (j, slot) in slot_vecs.iter_mut().enumerate() {
                            let (cube, special, grid) = if axis == 1 {
                                (c1, o.special.0 == j, &o.grids.grid1)
                            } else {
                                (c2, o.special.1 == j, &o.grids.grid2)
                            };
                            let mut v = vec![0.0; p.cells(axis)];
                            if special {
                                for (i, val) in haar_cell_values(grid, cube, 1, p) {
                                    v[i] = val;
                                }
                            } else {
                                let inv = 1.0 / cube.volume(p);
                                for i in cube_cells(grid, cube) {
                                    v[i] = inv;
                                }
                            }
                            *slot = v;
                        }
                        coeff_list.push((*b, slot_vecs));
                    }
                }
            }
            let nt = stream.templates.len();
            let mut weights = vec![0.0; coeff_list.len() * nt];
            let mut coeffs = vec![0.0; coeff_list.len()];
            for (ci, (a, slots)) in coeff_list.iter().enumerate() {
                coeffs[ci] = *a;
                for (ti, t) in stream.templates.iter().enumerate() {
                    let mut w = 1.0;
                    for j in 0..3 {
                        let arg = &stream.args[t.arg[j] as usize].values;
                        let mut ip = 0.0;
                        for (x, y) in arg.iter().zip(&slots[j]) {
                            ip += x * y;
                        }
                        w *= ip * vol;
                        if w == 0.0 {
                            break;
                        }
                    }
                    weights[ci * nt + ti] = w;
                }
            }
            AxisPairings::Rank {
                weights,
                coeffs,
                n_templates: nt,
            }
        }
    }
}

/// Class of an extracted piece, labeled by the per-axis cases: `S`, `A`,
/// `N` are shift-producing, `P` is a collapsed paraproduct axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct PieceClass {
    pub case1: &'static str,
    pub case2: &'static str,
    /// depth of the smallest cube below the outer cube per axis; zero on
    /// a collapsed paraproduct axis
    pub k1: u32,
    pub k2: u32,
}

impl PieceClass {
    pub fn is_full_paraproduct(&self) -> bool {
        self.case1 == "P" && self.case2 == "P"
    }

    pub fn is_partial_paraproduct(&self) -> bool {
        (self.case1 == "P") ^ (self.case2 == "P")
    }
}

/// Aggregated normalization data of one piece class.
#[derive(Debug, Clone, Default)]
pub struct PieceStats {
    pub count: u64,
    /// worst normalization ratio (after tuning, at most one when valid)
    pub max_ratio: f64,
    /// `(N, sup of ratios over outer cubes outside D(N))`
    pub tail: Vec<(u32, f64)>,
}

/// Everything a full engine pass produces.
pub struct StreamOutput {
    pub c0: f64,
    pub stats: BTreeMap<PieceClass, PieceStats>,
    pub census: BTreeMap<(Role, &'static str), u64>,
    pub raw_triples: u64,
    pub forms: Vec<f64>,
    /// standard error of the mean per tuple (meaningful in sampled mode)
    pub form_std_errors: Vec<f64>,
    pub grids_used: usize,
    pub template_pairs: u64,
}

/// Engine configuration.
#[derive(Debug, Clone)]
pub struct EngineConfig {
    /// cap on the exact ensemble size
    pub budget: u64,
    /// per axis, how many of the coarsest sub-top scales carry random
    /// shifts; finer components stay at zero. The finer components never
    /// influence the relative geometry that goodness reads, so the
    /// goodness average over the reduced ensemble is still exact.
    pub shifted_scales: Option<usize>,
    /// truncation ladder for the tail curves
    pub n_ladder: Vec<u32>,
    /// sample the ensemble instead of enumerating it: (samples, seed)
    pub montecarlo: Option<(usize, u64)>,
    /// seed recorded for goodness enumeration (unused when exact)
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            budget: 1 << 14,
            shifted_scales: None,
            n_ladder: vec![0, 1, 2, 3],
            montecarlo: None,
            seed: 1,
        }
    }
}

/// The assembled representation: configuration, tuned constant, goodness
/// probabilities, certificates, decay curves, and the case census.
#[derive(Debug)]
pub struct RepresentationBundle {
    pub params: LatticeParams,
    pub config: EngineConfig,
    pub c0: f64,
    pub pi1: Vec<(i32, Rational)>,
    pub pi2: Vec<(i32, Rational)>,
    pub stats: BTreeMap<PieceClass, PieceStats>,
    pub census: BTreeMap<(Role, &'static str), u64>,
    pub raw_triples: u64,
    pub grids_used: usize,
    pub template_pairs: u64,
}

fn exact_pi_tables(
    params: &LatticeParams,
    seed: u64,
) -> Result<(
    Vec<(i32, Rational)>,
    Vec<(i32, Rational)>,
    [BTreeMap<i32, f64>; 2],
)> {
    let mut out = Vec::new();
    let mut inv = [BTreeMap::new(), BTreeMap::new()];
    for axis in [1u8, 2u8] {
        let table = pi_good_table(params, axis, seed)?;
        let mut rat = Vec::new();
        for (k, pi) in table {
            if k <= params.finest_exp() {
                continue;
            }
            match pi {
                PiGood::Exact(r) => {
                    if *r.numer() == 0 {
                        return Err(Error::Infeasible(alloc::format!(
                            "goodness probability vanishes at scale 2^{k} on axis {axis}"
                        )));
                    }
                    inv[(axis - 1) as usize].insert(k, *r.denom() as f64 / *r.numer() as f64);
                    rat.push((k, r));
                }
                PiGood::Sampled { .. } => {
                    return Err(Error::Infeasible(
                        "exact assembly needs exhaustively enumerable goodness probabilities"
                            .to_string(),
                    ))
                }
            }
        }
        out.push(rat);
    }
    let pi2 = out.pop().unwrap();
    let pi1 = out.pop().unwrap();
    Ok((pi1, pi2, inv))
}

/// Enumerate the grid ensemble: all components, or only the configured
/// number of coarsest sub-top components with the rest frozen at zero.
pub fn engine_ensemble(params: &LatticeParams, cfg: &EngineConfig) -> Result<Vec<ProductGrid>> {
    if let Some((samples, seed)) = cfg.montecarlo {
        let full = engine_ensemble(
            params,
            &EngineConfig {
                montecarlo: None,
                ..cfg.clone()
            },
        )?;
        let mut rng = crate::rng::SeededRng::new(seed);
        return Ok((0..samples)
            .map(|_| full[rng.below(full.len() as u64) as usize].clone())
            .collect());
    }
    match cfg.shifted_scales {
        None => enumerate_product_grids(params, cfg.budget),
        Some(k) => {
            let comps = params.shift_components();
            let k = k.min(comps);
            let frozen = comps - k;
            let bits = 2 * k as u32; // one dimension per axis
            if params.n1 != 1 || params.n2 != 1 {
                return Err(Error::Config(
                    "reduced ensembles are implemented for one dimension per parameter"
                        .to_string(),
                ));
            }
            if (1u64 << bits) > cfg.budget {
                return Err(Error::BudgetExceeded(alloc::format!(
                    "reduced ensemble has 2^{bits} members"
                )));
            }
            let mut out = Vec::with_capacity(1 << bits);
            for code in 0..(1u64 << bits) {
                let mut omega1 = vec![0u8; comps];
                let mut omega2 = vec![0u8; comps];
                for i in 0..k {
                    omega1[frozen + i] = ((code >> i) & 1) as u8;
                    omega2[frozen + i] = ((code >> (k + i)) & 1) as u8;
                }
                out.push(ProductGrid::new(
                    crate::lattice::enumerate_grid(params, 1, &omega1)?,
                    crate::lattice::enumerate_grid(params, 2, &omega2)?,
                )?);
            }
            Ok(out)
        }
    }
}

/// Per-axis aggregates of one stream against one operator pairing.
struct AxisAggregates {
    /// per (case label, depth): max |pref * W| / cap over templates
    shift_max: BTreeMap<(&'static str, u32), f64>,
    /// per (case label, depth) and ladder index: max outside D(N)
    shift_out: BTreeMap<(&'static str, u32), Vec<f64>>,
    /// collapsed-template values per role: (K cube, pref * W * |K|)
    collapsed: BTreeMap<Role, Vec<(DyadicCube, f64)>>,
    /// sparse coefficient tensor over factor triples (per rank component)
    tensors: Vec<BTreeMap<[u32; 3], f64>>,
    n_factors: usize,
    template_pairs_side: u64,
}

fn axis_aggregates(
    stream: &AxisStream,
    pairings: &AxisPairings,
    ladder: &[u32],
) -> AxisAggregates {
    let p = &stream.grid.params;
    let rank = pairings.rank();
    let mut tensors: Vec<BTreeMap<[u32; 3], f64>> = vec![BTreeMap::new(); rank];
    let mut shift_max: BTreeMap<(&'static str, u32), f64> = BTreeMap::new();
    let mut shift_out: BTreeMap<(&'static str, u32), Vec<f64>> = BTreeMap::new();
    let mut collapsed: BTreeMap<Role, Vec<(DyadicCube, f64)>> = BTreeMap::new();
    let mut sides = 0u64;
    for (ti, t) in stream.templates.iter().enumerate() {
        // full pairing value for certificates (sum over rank components)
        let mut w_total = 0.0;
        for c in 0..rank {
            let w = pairings.weight(c, ti);
            if w != 0.0 {
                tensors[c]
                    .entry(t.fpair)
                    .and_modify(|v| *v += t.pref * w)
                    .or_insert(t.pref * w);
                w_total += pairings.coeff(c) * w;
            }
        }
        if w_total == 0.0 {
            continue;
        }
        sides += 1;
        let value = t.pref * w_total;
        if t.case == AxisCase::Collapsed {
            collapsed
                .entry(t.role)
                .or_default()
                .push((t.k_cube, value * t.k_cube.volume(p)));
        } else {
            // certificate of the stored table: the complexity weight
            // 2^{-k delta/2} is divided out of the coefficient first
            let delta = p.delta(stream.grid.axis);
            let weight = fmath::powf(2.0, -(t.k_depth as f64) * delta / 2.0);
            let cap = t.half_vols / fmath::powf(t.q.volume(p), 2.0);
            let r = fmath::abs(value) / (weight * cap);
            let label = (t.case.label(), t.k_depth);
            let e = shift_max.entry(label).or_insert(0.0);
            if r > *e {
                *e = r;
            }
            let outs = shift_out
                .entry(label)
                .or_insert_with(|| vec![0.0; ladder.len()]);
            for (ni, n) in ladder.iter().enumerate() {
                if !in_dn(&t.q, &stream.grid, *n) && r > outs[ni] {
                    outs[ni] = r;
                }
            }
        }
    }
    AxisAggregates {
        shift_max,
        shift_out,
        collapsed,
        tensors,
        n_factors: stream.factors.len(),
        template_pairs_side: sides,
    }
}

/// BMO-style packing of a cube-indexed sequence over the grid cubes, with
/// an optional truncation exclusion.
fn bmo_packing(
    grid: &ShiftedGrid,
    seq: &[(DyadicCube, f64)],
    exclude: Option<u32>,
) -> f64 {
    let p = &grid.params;
    let mut best = 0.0f64;
    for q0 in grid.all_cubes() {
        let mut s = 0.0;
        for (c, v) in seq {
            if let Some(n) = exclude {
                if in_dn(c, grid, n) {
                    continue;
                }
            }
            if grid.contains(&q0, c) {
                s += v * v;
            }
        }
        best = best.max(s / q0.volume(p));
    }
    fmath::sqrt(best)
}

/// Run the decomposition stream over the grid ensemble, collecting
/// certificates and the bundle forms on the supplied (mean-adjusted)
/// tuples.
pub fn run_stream(
    op: &EngineOp,
    params: &LatticeParams,
    cfg: &EngineConfig,
    tuples: &[(StepFunction, StepFunction, StepFunction)],
) -> Result<StreamOutput> {
    params.validate()?;
    let (_pi1, _pi2, inv_pi) = exact_pi_tables(params, cfg.seed)?;
    let grids = engine_ensemble(params, cfg)?;
    let n_grids = grids.len();

    let mut axis_cache: [BTreeMap<u64, AxisStream>; 2] = [BTreeMap::new(), BTreeMap::new()];
    for g in &grids {
        for (ai, grid) in [&g.grid1, &g.grid2].into_iter().enumerate() {
            let id = grid.grid_id();
            if !axis_cache[ai].contains_key(&id) {
                axis_cache[ai].insert(id, AxisStream::build(grid, &inv_pi[ai])?);
            }
        }
    }

    let mut stats: BTreeMap<PieceClass, PieceStats> = BTreeMap::new();
    let mut census: BTreeMap<(Role, &'static str), u64> = BTreeMap::new();
    let mut raw_triples = 0u64;
    let mut forms = vec![0.0f64; tuples.len()];
    let mut forms_sq = vec![0.0f64; tuples.len()];
    let mut template_pairs = 0u64;
    let ladder = &cfg.n_ladder;
    let p = params;

    for g in &grids {
        let s1 = &axis_cache[0][&g.grid1.grid_id()];
        let s2 = &axis_cache[1][&g.grid2.grid_id()];
        let w1 = build_pairings(op, s1, 1);
        let w2 = build_pairings(op, s2, 2);
        let a1 = axis_aggregates(s1, &w1, ladder);
        let a2 = axis_aggregates(s2, &w2, ladder);
        template_pairs += a1.template_pairs_side * a2.template_pairs_side;

        for (k, v) in &s1.census {
            *census.entry(*k).or_insert(0) += v;
        }
        for (k, v) in &s2.census {
            *census.entry(*k).or_insert(0) += v;
        }
        raw_triples += s1.raw_triples + s2.raw_triples;

        // shift-pair certificates: ratios factor across the axes
        for (key1, &r1) in &a1.shift_max {
            for (key2, &r2) in &a2.shift_max {
                let class = PieceClass {
                    case1: key1.0,
                    case2: key2.0,
                    k1: key1.1,
                    k2: key2.1,
                };
                let entry = stats.entry(class).or_default();
                entry.count += 1;
                if entry.tail.is_empty() {
                    entry.tail = ladder.iter().map(|n| (*n, 0.0f64)).collect();
                }
                entry.max_ratio = entry.max_ratio.max(r1 * r2);
                let o1 = &a1.shift_out[key1];
                let o2 = &a2.shift_out[key2];
                for (ni, (_, sup)) in entry.tail.iter_mut().enumerate() {
                    let v = (o1[ni] * r2).max(r1 * o2[ni]);
                    if v > *sup {
                        *sup = v;
                    }
                }
            }
        }

        // partial paraproducts: one axis collapsed
        for (shift_aggs, pp_aggs, pp_grid, flip) in [
            (&a1, &a2, &g.grid2, false),
            (&a2, &a1, &g.grid1, true),
        ] {
            let mut pack_all = 0.0f64;
            let mut pack_out: Vec<f64> = vec![0.0; ladder.len()];
            let mut any = false;
            for seq in pp_aggs.collapsed.values() {
                any = true;
                pack_all = pack_all.max(bmo_packing(pp_grid, seq, None));
                for (ni, n) in ladder.iter().enumerate() {
                    pack_out[ni] = pack_out[ni].max(bmo_packing(pp_grid, seq, Some(*n)));
                }
            }
            if !any {
                continue;
            }
            for (key1, &r1) in &shift_aggs.shift_max {
                let class = if flip {
                    PieceClass {
                        case1: "P",
                        case2: key1.0,
                        k1: 0,
                        k2: key1.1,
                    }
                } else {
                    PieceClass {
                        case1: key1.0,
                        case2: "P",
                        k1: key1.1,
                        k2: 0,
                    }
                };
                let entry = stats.entry(class).or_default();
                entry.count += 1;
                if entry.tail.is_empty() {
                    entry.tail = ladder.iter().map(|n| (*n, 0.0f64)).collect();
                }
                entry.max_ratio = entry.max_ratio.max(r1 * pack_all);
                let o1 = &shift_aggs.shift_out[key1];
                for (ni, (_, sup)) in entry.tail.iter_mut().enumerate() {
                    let v = (o1[ni] * pack_all).max(r1 * pack_out[ni]);
                    if v > *sup {
                        *sup = v;
                    }
                }
            }
        }

        // full paraproducts: both axes collapsed, rank-one tables
        {
            let total_vol = fmath::exp2i(p.top_exp() * 2);
            let mut any = false;
            let mut single = 0.0f64;
            let mut mass = 0.0f64;
            let mut single_out = vec![0.0f64; ladder.len()];
            let mut mass_out = vec![0.0f64; ladder.len()];
            for seq1 in a1.collapsed.values() {
                for seq2 in a2.collapsed.values() {
                    any = true;
                    let s1v: f64 = seq1.iter().map(|(_, v)| v * v).sum();
                    let s2v: f64 = seq2.iter().map(|(_, v)| v * v).sum();
                    let m1: f64 = seq1
                        .iter()
                        .map(|(c, v)| v * v / c.volume(p))
                        .fold(0.0, f64::max);
                    let m2: f64 = seq2
                        .iter()
                        .map(|(c, v)| v * v / c.volume(p))
                        .fold(0.0, f64::max);
                    single = single.max(m1 * m2);
                    mass += s1v * s2v;
                    for (ni, n) in ladder.iter().enumerate() {
                        let s1o: f64 = seq1
                            .iter()
                            .filter(|(c, _)| !in_dn(c, &g.grid1, *n))
                            .map(|(_, v)| v * v)
                            .sum();
                        let s2o: f64 = seq2
                            .iter()
                            .filter(|(c, _)| !in_dn(c, &g.grid2, *n))
                            .map(|(_, v)| v * v)
                            .sum();
                        let m1o: f64 = seq1
                            .iter()
                            .filter(|(c, _)| !in_dn(c, &g.grid1, *n))
                            .map(|(c, v)| v * v / c.volume(p))
                            .fold(0.0, f64::max);
                        let m2o: f64 = seq2
                            .iter()
                            .filter(|(c, _)| !in_dn(c, &g.grid2, *n))
                            .map(|(c, v)| v * v / c.volume(p))
                            .fold(0.0, f64::max);
                        // a rectangle is outside D(N) when either factor is
                        single_out[ni] =
                            single_out[ni].max(m1o * m2).max(m1 * m2o);
                        mass_out[ni] += (s1o * s2v).max(s1v * s2o);
                    }
                }
            }
            if any {
                let class = PieceClass {
                    case1: "P",
                    case2: "P",
                    k1: 0,
                    k2: 0,
                };
                let entry = stats.entry(class).or_default();
                entry.count += 1;
                if entry.tail.is_empty() {
                    entry.tail = ladder.iter().map(|n| (*n, 0.0f64)).collect();
                }
                entry.max_ratio = entry
                    .max_ratio
                    .max(fmath::sqrt(single.max(mass / total_vol)));
                for (ni, (_, sup)) in entry.tail.iter_mut().enumerate() {
                    let v = fmath::sqrt(single_out[ni].max(mass_out[ni] / total_vol));
                    if v > *sup {
                        *sup = v;
                    }
                }
            }
        }

        // form accumulation via the factored triple contraction
        if !tuples.is_empty() {
            let nf1 = a1.n_factors;
            let nf2 = a2.n_factors;
            let mut grid_forms = vec![0.0f64; tuples.len()];
            for (ti, (f1, f2, f3)) in tuples.iter().enumerate() {
                let fs = [f1, f2, f3];
                // per-slot pairing matrices
                let mut mats: [Vec<f64>; 3] = [vec![], vec![], vec![]];
                for j in 0..3 {
                    let mut m = vec![0.0; nf1 * nf2];
                    for (i1, (c1, e1)) in s1.factors.iter().enumerate() {
                        for (i2, (c2, e2)) in s2.factors.iter().enumerate() {
                            m[i1 * nf2 + i2] =
                                crate::modelops::pair_tensor(fs[j], g, c1, *e1, c2, *e2);
                        }
                    }
                    mats[j] = m;
                }
                for c in 0..w1.rank() {
                    let t1m = &a1.tensors[c];
                    let t2m = &a2.tensors[c];
                    if t1m.is_empty() || t2m.is_empty() {
                        continue;
                    }
                    // R1[b1][a2][a3] = sum_{a1} S1 M1[a1,b1]
                    let mut r1 = vec![0.0f64; nf2 * nf1 * nf1];
                    for (key, v) in t1m {
                        let (q1, q2, q3) = (key[0] as usize, key[1] as usize, key[2] as usize);
                        let row = &mats[0][q1 * nf2..(q1 + 1) * nf2];
                        for (b1, m1v) in row.iter().enumerate() {
                            if *m1v != 0.0 {
                                r1[(b1 * nf1 + q2) * nf1 + q3] += v * m1v;
                            }
                        }
                    }
                    // R2[b1][b2][a3] = sum_{a2} R1 M2[a2,b2]
                    let mut r2 = vec![0.0f64; nf2 * nf2 * nf1];
                    for b1 in 0..nf2 {
                        for a2v in 0..nf1 {
                            let base = (b1 * nf1 + a2v) * nf1;
                            let mrow = &mats[1][a2v * nf2..(a2v + 1) * nf2];
                            for a3v in 0..nf1 {
                                let r1v = r1[base + a3v];
                                if r1v == 0.0 {
                                    continue;
                                }
                                for (b2, m2v) in mrow.iter().enumerate() {
                                    if *m2v != 0.0 {
                                        r2[(b1 * nf2 + b2) * nf1 + a3v] += r1v * m2v;
                                    }
                                }
                            }
                        }
                    }
                    // form += sum S2[b] * sum_{a3} R2[b1][b2][a3] M3[a3,b3]
                    let mut acc = 0.0;
                    for (key, v) in t2m {
                        let (b1, b2, b3) = (key[0] as usize, key[1] as usize, key[2] as usize);
                        let base = (b1 * nf2 + b2) * nf1;
                        let mut s = 0.0;
                        for a3v in 0..nf1 {
                            let r2v = r2[base + a3v];
                            if r2v != 0.0 {
                                s += r2v * mats[2][a3v * nf2 + b3];
                            }
                        }
                        acc += v * s;
                    }
                    grid_forms[ti] += acc * w1.coeff(c);
                }
            }
            for (ti, v) in grid_forms.iter().enumerate() {
                forms[ti] += v;
                forms_sq[ti] += v * v;
            }
        }
    }

    let scale = 1.0 / n_grids as f64;
    forms.iter_mut().for_each(|v| *v *= scale);
    let form_std_errors: Vec<f64> = forms
        .iter()
        .zip(&forms_sq)
        .map(|(m, sq)| {
            let var = (sq * scale - m * m).max(0.0);
            fmath::sqrt(var * scale)
        })
        .collect();

    // tune the constant: smallest power of two covering every ratio
    let mut worst = 0.0f64;
    for st in stats.values() {
        worst = worst.max(st.max_ratio);
    }
    let mut c0 = 1.0f64;
    while c0 < worst {
        c0 *= 2.0;
    }
    for st in stats.values_mut() {
        st.max_ratio /= c0;
        for (_, s) in st.tail.iter_mut() {
            *s /= c0;
        }
    }

    Ok(StreamOutput {
        c0,
        stats,
        census,
        raw_triples,
        forms,
        form_std_errors,
        grids_used: n_grids,
        template_pairs,
    })
}

/// Slow reference evaluation of the stream form on one product grid via
/// the explicit template double loop. Used by tests to pin the identity.
pub fn single_grid_form(
    op: &EngineOp,
    g: &ProductGrid,
    inv_pi: [&BTreeMap<i32, f64>; 2],
    tuple: &(StepFunction, StepFunction, StepFunction),
) -> Result<f64> {
    let s1 = AxisStream::build(&g.grid1, inv_pi[0])?;
    let s2 = AxisStream::build(&g.grid2, inv_pi[1])?;
    let w1 = build_pairings(op, &s1, 1);
    let w2 = build_pairings(op, &s2, 2);
    let fs = [&tuple.0, &tuple.1, &tuple.2];
    let nf2 = s2.factors.len();
    let mut mats: [Vec<f64>; 3] = [vec![], vec![], vec![]];
    for j in 0..3 {
        let mut m = vec![0.0; s1.factors.len() * nf2];
        for (i1, (c1, e1)) in s1.factors.iter().enumerate() {
            for (i2, (c2, e2)) in s2.factors.iter().enumerate() {
                m[i1 * nf2 + i2] = crate::modelops::pair_tensor(fs[j], g, c1, *e1, c2, *e2);
            }
        }
        mats[j] = m;
    }
    let mut total = 0.0;
    for (t1i, t1) in s1.templates.iter().enumerate() {
        for (t2i, t2) in s2.templates.iter().enumerate() {
            let mut w = 0.0;
            for c in 0..w1.rank() {
                w += w1.coeff(c) * w1.weight(c, t1i) * w2.weight(c, t2i);
            }
            if w == 0.0 {
                continue;
            }
            let prod = mats[0][(t1.fpair[0] as usize) * nf2 + t2.fpair[0] as usize]
                * mats[1][(t1.fpair[1] as usize) * nf2 + t2.fpair[1] as usize]
                * mats[2][(t1.fpair[2] as usize) * nf2 + t2.fpair[2] as usize];
            total += t1.pref * t2.pref * w * prod;
        }
    }
    Ok(total)
}

/// Exposed for tests: inverse goodness tables of a parameter set.
pub fn inverse_pi_tables(params: &LatticeParams, seed: u64) -> Result<[BTreeMap<i32, f64>; 2]> {
    let (_a, _b, inv) = exact_pi_tables(params, seed)?;
    Ok(inv)
}

/// Assemble the bundle: run the stream without tuples.
pub fn assemble(
    op: &EngineOp,
    params: &LatticeParams,
    cfg: &EngineConfig,
) -> Result<RepresentationBundle> {
    let (pi1, pi2, _) = exact_pi_tables(params, cfg.seed)?;
    let out = run_stream(op, params, cfg, &[])?;
    Ok(RepresentationBundle {
        params: *params,
        config: cfg.clone(),
        c0: out.c0,
        pi1,
        pi2,
        stats: out.stats,
        census: out.census,
        raw_triples: out.raw_triples,
        grids_used: out.grids_used,
        template_pairs: out.template_pairs,
    })
}

/// Verification record for one test tuple.
#[derive(Debug, Clone)]
pub struct VerifyRecord {
    pub brute: f64,
    pub bundle: f64,
    pub rel_err: f64,
}

/// Evaluate the bundle form against brute force on test tuples; inputs
/// are mean-adjusted per parameter before either side is evaluated.
pub fn verify(
    op: &EngineOp,
    params: &LatticeParams,
    cfg: &EngineConfig,
    tuples: &[(StepFunction, StepFunction, StepFunction)],
) -> Result<(Vec<VerifyRecord>, f64)> {
    let adjusted: Vec<(StepFunction, StepFunction, StepFunction)> = tuples
        .iter()
        .map(|(a, b, c)| (a.mean_adjusted(), b.mean_adjusted(), c.mean_adjusted()))
        .collect();
    let out = run_stream(op, params, cfg, &adjusted)?;
    let mut records = Vec::with_capacity(adjusted.len());
    let mut max_rel = 0.0f64;
    let mut scale = 0.0f64;
    let mut brutes = Vec::with_capacity(adjusted.len());
    for (f1, f2, f3) in &adjusted {
        let b = op.form(f1, f2, f3);
        scale = scale.max(fmath::abs(b));
        brutes.push(b);
    }
    for (b, v) in brutes.iter().zip(&out.forms) {
        let denom = fmath::abs(*b).max(scale * 1e-3).max(1e-12);
        let rel = fmath::abs(b - v) / denom;
        max_rel = max_rel.max(rel);
        records.push(VerifyRecord {
            brute: *b,
            bundle: *v,
            rel_err: rel,
        });
    }
    Ok((records, max_rel))
}

/// Tail curves per piece class over the truncation ladder.
pub fn decay_report(bundle: &RepresentationBundle) -> Vec<(String, Vec<(u32, f64)>)> {
    bundle
        .stats
        .iter()
        .map(|(class, st)| {
            (
                alloc::format!("{}{}-k{}k{}", class.case1, class.case2, class.k1, class.k2),
                st.tail.clone(),
            )
        })
        .collect()
}

/// The Haar pairing of a trilinear form against a rectangle triple:
/// per slot, a cancellative or averaged Haar tensor selected by the
/// pattern bits (axis1, axis2).
pub fn extract_g(
    op: &dyn TriForm,
    grids: &ProductGrid,
    rects: [(&DyadicCube, &DyadicCube); 3],
    pattern: [(u8, u8); 3],
) -> Result<f64> {
    let p = grids.params();
    let mut u: Vec<StepFunction> = Vec::with_capacity(3);
    let mut v: Vec<StepFunction> = Vec::with_capacity(3);
    for (j, (c1, c2)) in rects.iter().enumerate() {
        let mut f1 = StepFunction::zero(p, crate::step::AxisSet::One);
        for (i, val) in haar_cell_values(&grids.grid1, c1, pattern[j].0, p) {
            f1.values[i] = val;
        }
        let mut f2 = StepFunction::zero(p, crate::step::AxisSet::Two);
        for (i, val) in haar_cell_values(&grids.grid2, c2, pattern[j].1, p) {
            f2.values[i] = val;
        }
        u.push(f1);
        v.push(f2);
    }
    Ok(op.form_tensor([&u[0], &u[1], &u[2]], [&v[0], &v[1], &v[2]]))
}

/// Haar tensor helper for test inputs.
pub fn haar_tensor(grids: &ProductGrid, c1: &DyadicCube, c2: &DyadicCube) -> Result<StepFunction> {
    let h1 = haar(&grids.grid1, &HaarIndex { cube: *c1, eta: 1 })?;
    let h2 = haar(&grids.grid2, &HaarIndex { cube: *c2, eta: 1 })?;
    StepFunction::tensor(&h1, &h2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::builtin_kernel;
    use crate::lattice::standard_grid;
    use crate::modelops::ShiftKey;
    use crate::rng::SeededRng;
    use crate::step::AxisSet;

    fn flagship_params() -> LatticeParams {
        // tree depth 4 below the torus top, three shifted scales per axis
        LatticeParams::new(1, 1, 1, 2, true, 3).unwrap()
    }

    fn flagship_config() -> EngineConfig {
        EngineConfig {
            shifted_scales: Some(3),
            ..EngineConfig::default()
        }
    }

    fn random_tuple(p: &LatticeParams, seed: u64) -> (StepFunction, StepFunction, StepFunction) {
        let mut rng = SeededRng::new(seed);
        let mut mk = || {
            let mut f = StepFunction::zero(p, AxisSet::Both);
            f.values.iter_mut().for_each(|v| *v = rng.symmetric());
            f.mean_adjusted()
        };
        (mk(), mk(), mk())
    }

    #[test]
    fn zero_operator_gives_empty_bundle() {
        let p = flagship_params();
        let mut spec = builtin_kernel(&p, "compact_cz").unwrap();
        spec.k1 = crate::kernels::Axis1dKernel::Zero;
        spec.k2 = crate::kernels::Axis1dKernel::Zero;
        let op = KernelOp::new(spec);
        let e = EngineOp::Kernel(&op);
        let cfg = flagship_config();
        let tuples = vec![random_tuple(&p, 5)];
        let (records, max_rel) = verify(&e, &p, &cfg, &tuples).unwrap();
        assert!(max_rel < 1e-12);
        assert!(records[0].bundle.abs() < 1e-14);
    }

    #[test]
    fn compact_cz_representation_is_exact() {
        let p = flagship_params();
        let op = KernelOp::new(builtin_kernel(&p, "compact_cz").unwrap());
        let e = EngineOp::Kernel(&op);
        let cfg = flagship_config();
        let tuples: Vec<_> = (0..3).map(|s| random_tuple(&p, 100 + s)).collect();
        let (records, max_rel) = verify(&e, &p, &cfg, &tuples).unwrap();
        for r in &records {
            assert!(r.brute.is_finite() && r.bundle.is_finite());
        }
        assert!(max_rel <= 1e-8, "relative error {max_rel}");
    }

    #[test]
    fn construct_then_decompose_round_trip() {
        let p = flagship_params();
        let grids = ProductGrid::new(
            standard_grid(&p, 1).unwrap(),
            standard_grid(&p, 2).unwrap(),
        )
        .unwrap();
        let mut op = ShiftOp::new(
            grids.clone(),
            vec![(1, 0), (1, 1), (0, 1)],
            vec![(1, 1), (0, 1), (1, 0)],
        )
        .unwrap();
        let q1 = DyadicCube::new(1, 1, [0, 0, 0]);
        let q2 = DyadicCube::new(2, 1, [1, 0, 0]);
        let c1a = grids.grid1.child(&q1, 0).unwrap();
        let c1b = grids.grid1.child(&q1, 1).unwrap();
        let c2a = grids.grid2.child(&q2, 0).unwrap();
        let key = ShiftKey {
            q: (q1, q2),
            cubes: vec![(c1a, q2), (c1b, c2a), (q1, c2a)],
        };
        let cap = op.normalization(&key);
        op.insert(key, 0.8 * cap).unwrap();
        let ops = [op];
        let e = EngineOp::Shifts(&ops);
        let cfg = flagship_config();
        let tuples: Vec<_> = (0..3).map(|s| random_tuple(&p, 300 + s)).collect();
        let (_, max_rel) = verify(&e, &p, &cfg, &tuples).unwrap();
        assert!(max_rel <= 1e-12, "round trip error {max_rel}");
    }

    #[test]
    fn assemble_reports_certificates_and_census() {
        let p = flagship_params();
        let op = KernelOp::new(builtin_kernel(&p, "compact_cz").unwrap());
        let e = EngineOp::Kernel(&op);
        let bundle = assemble(&e, &p, &flagship_config()).unwrap();
        assert!(bundle.c0 >= 1.0);
        assert_eq!(bundle.grids_used, 64);
        assert!(!bundle.stats.is_empty());
        for (class, st) in &bundle.stats {
            assert!(
                st.max_ratio <= 1.0 + 1e-9,
                "class {class:?} ratio {} after tuning",
                st.max_ratio
            );
        }
        assert!(bundle.census.keys().any(|(_, c)| *c == "S"));
        assert!(bundle.census.keys().any(|(_, c)| *c == "N"));
        // partition audit: the census covers every raw triple exactly once
        let total: u64 = bundle.census.values().sum();
        assert_eq!(total, bundle.raw_triples);
    }

    /// The per-axis branch rearrangement as a pointwise bilinear identity:
    /// products of full martingale sums split into the staggered and
    /// aligned branches exactly.
    #[test]
    fn branch_split_identity_pointwise() {
        use crate::haar::{avg_at_scale, martingale, Martingale};
        let p = flagship_params();
        let g = standard_grid(&p, 1).unwrap();
        let mut rng = SeededRng::new(9);
        let mut f = StepFunction::zero(&p, crate::step::AxisSet::One);
        let mut h = StepFunction::zero(&p, crate::step::AxisSet::One);
        f.values.iter_mut().for_each(|v| *v = rng.symmetric());
        h.values.iter_mut().for_each(|v| *v = rng.symmetric());
        // mean-adjust on the axis
        let fm = f.integral() / fmath::exp2i(p.top_exp());
        let hm = h.integral() / fmath::exp2i(p.top_exp());
        let f = f.sub(&StepFunction::constant(&p, crate::step::AxisSet::One, fm)).unwrap();
        let h = h.sub(&StepFunction::constant(&p, crate::step::AxisSet::One, hm)).unwrap();
        for kk in (p.finest_exp() + 1)..=p.top_exp() {
            // lhs: (sum_{s1 >= kk} D_(s1) f) * (sum_{s2 >= kk} D_(s2) h)
            let mut sf = StepFunction::zero(&p, crate::step::AxisSet::One);
            let mut sh = StepFunction::zero(&p, crate::step::AxisSet::One);
            for s in kk..=p.top_exp() {
                sf = sf.add(&martingale(&f, &g, Martingale::DiffAtScale(s)).unwrap()).unwrap();
                sh = sh.add(&martingale(&h, &g, Martingale::DiffAtScale(s)).unwrap()).unwrap();
            }
            let lhs = sf.mul(&sh).unwrap();
            // rhs: staggered + aligned branches
            let mut rhs = StepFunction::zero(&p, crate::step::AxisSet::One);
            for s in kk..=p.top_exp() {
                let df = martingale(&f, &g, Martingale::DiffAtScale(s)).unwrap();
                let eh = avg_at_scale(&h, &g, s - 1).unwrap();
                rhs = rhs.add(&df.mul(&eh).unwrap()).unwrap();
                let ef = avg_at_scale(&f, &g, s).unwrap();
                let dh = martingale(&h, &g, Martingale::DiffAtScale(s)).unwrap();
                rhs = rhs.add(&ef.mul(&dh).unwrap()).unwrap();
            }
            let diff = lhs.sub(&rhs).unwrap().sup_norm();
            assert!(diff < 1e-12, "branch identity fails at base scale {kk}: {diff}");
        }
    }

    /// For rank-one test forms and tensor inputs the engine factors per
    /// axis: one axis stream must satisfy
    /// `sum_t pref Π<arg_j, u_j> Π<a_j, fpair_j> = Π <a_j, u_j>`
    /// for mean-adjusted 1D inputs. This pins every per-axis bookkeeping
    /// choice: blocks, branches, cases, nested splits, and chains.
    #[test]
    fn axis_stream_rank_one_identity() {
        let p = flagship_params();
        let g = standard_grid(&p, 1).unwrap();
        let inv = inverse_pi_tables(&p, 1).unwrap();
        let stream = AxisStream::build(&g, &inv[0]).unwrap();
        let vol = p.cell_vol(1);
        let cells = p.cells(1);
        let mut rng = SeededRng::new(77);
        let mut mk = || {
            let mut f = StepFunction::zero(&p, crate::step::AxisSet::One);
            f.values.iter_mut().for_each(|v| *v = rng.symmetric());
            let m = f.integral() / fmath::exp2i(p.top_exp());
            f.sub(&StepFunction::constant(&p, crate::step::AxisSet::One, m))
                .unwrap()
        };
        let a: Vec<StepFunction> = (0..3).map(|_| mk()).collect();
        // factor pairings of the a's
        let fdot: Vec<Vec<f64>> = (0..3)
            .map(|j| {
                stream
                    .factors
                    .iter()
                    .map(|(c, e)| {
                        haar_cell_values(&g, c, *e, &p)
                            .iter()
                            .map(|(i, w)| a[j].values[*i] * w)
                            .sum::<f64>()
                            * vol
                    })
                    .collect()
            })
            .collect();
        // probe with every cell-indicator triple
        for c1 in 0..cells {
            for c2 in 0..cells {
                for c3 in 0..cells {
                    let mut lhs = 0.0;
                    for t in &stream.templates {
                        let w = stream.args[t.arg[0] as usize].values[c1]
                            * stream.args[t.arg[1] as usize].values[c2]
                            * stream.args[t.arg[2] as usize].values[c3];
                        if w == 0.0 {
                            continue;
                        }
                        lhs += t.pref
                            * w
                            * fdot[0][t.fpair[0] as usize]
                            * fdot[1][t.fpair[1] as usize]
                            * fdot[2][t.fpair[2] as usize];
                    }
                    let rhs = a[0].values[c1] * a[1].values[c2] * a[2].values[c3];
                    assert!(
                        (lhs - rhs).abs() < 1e-10,
                        "cell triple ({c1},{c2},{c3}): lhs {lhs} vs rhs {rhs}"
                    );
                }
            }
        }
    }

    /// The stream on a single grid reproduces the brute form exactly for
    /// mean-adjusted inputs when every cube is good.
    #[test]
    fn single_grid_identity_against_brute_force() {
        let p = flagship_params();
        let grids = ProductGrid::new(
            standard_grid(&p, 1).unwrap(),
            standard_grid(&p, 2).unwrap(),
        )
        .unwrap();
        let inv = inverse_pi_tables(&p, 1).unwrap();
        let op = KernelOp::new(builtin_kernel(&p, "compact_cz").unwrap());
        let e = EngineOp::Kernel(&op);
        for seed in [11u64, 12, 13] {
            let t = random_tuple(&p, seed);
            let stream = single_grid_form(&e, &grids, [&inv[0], &inv[1]], &t).unwrap();
            let brute = e.form(&t.0, &t.1, &t.2);
            assert!(
                (stream - brute).abs() < 1e-10 * (1.0 + brute.abs()),
                "seed {seed}: stream {stream} vs brute {brute}"
            );
        }
    }

    /// A rank-one trilinear form for pairing tests.
    struct RankOne {
        params: LatticeParams,
        phis: [StepFunction; 3],
    }

    impl TriForm for RankOne {
        fn lattice(&self) -> &LatticeParams {
            &self.params
        }
        fn form(&self, f1: &StepFunction, f2: &StepFunction, f3: &StepFunction) -> f64 {
            f1.inner(&self.phis[0]).unwrap()
                * f2.inner(&self.phis[1]).unwrap()
                * f3.inner(&self.phis[2]).unwrap()
        }
    }

    #[test]
    fn extract_g_rank_one_and_symmetry() {
        let p = flagship_params();
        let grids = ProductGrid::new(
            standard_grid(&p, 1).unwrap(),
            standard_grid(&p, 2).unwrap(),
        )
        .unwrap();
        // zero operator pairs to zero
        let zero = RankOne {
            params: p,
            phis: [
                StepFunction::zero(&p, AxisSet::Both),
                StepFunction::zero(&p, AxisSet::Both),
                StepFunction::zero(&p, AxisSet::Both),
            ],
        };
        let i1 = DyadicCube::new(1, 0, [1, 0, 0]);
        let i2 = DyadicCube::new(2, 0, [2, 0, 0]);
        let j1 = DyadicCube::new(1, -1, [3, 0, 0]);
        let j2 = DyadicCube::new(2, -1, [5, 0, 0]);
        let k1 = DyadicCube::new(1, 0, [0, 0, 0]);
        let k2 = DyadicCube::new(2, 1, [1, 0, 0]);
        let rects = [(&i1, &i2), (&j1, &j2), (&k1, &k2)];
        let pattern = [(1, 1), (0, 0), (1, 1)];
        assert_eq!(extract_g(&zero, &grids, rects, pattern).unwrap(), 0.0);
        // rank-one form: the pairing is the product of three Haar
        // coefficients of the profiles
        let mut rng = SeededRng::new(55);
        let mk = |rng: &mut SeededRng| {
            let mut f = StepFunction::zero(&p, AxisSet::Both);
            f.values.iter_mut().for_each(|v| *v = rng.symmetric());
            f
        };
        let op = RankOne {
            params: p,
            phis: [mk(&mut rng), mk(&mut rng), mk(&mut rng)],
        };
        let got = extract_g(&op, &grids, rects, pattern).unwrap();
        let mut expect = 1.0;
        for (j, (c1, c2)) in rects.iter().enumerate() {
            expect *= crate::modelops::pair_tensor(
                &op.phis[j],
                &grids,
                c1,
                pattern[j].0,
                c2,
                pattern[j].1,
            );
        }
        assert!((got - expect).abs() < 1e-12 * (1.0 + expect.abs()));
        // pairing under the full adjoint equals the permuted pairing
        let kop = KernelOp::new(builtin_kernel(&p, "compact_cz").unwrap());
        let base = extract_g(&kop, &grids, rects, pattern).unwrap();
        let adj = kop.adjoint(1, 1);
        let permuted = extract_g(
            &adj,
            &grids,
            [(&k1, &k2), (&j1, &j2), (&i1, &i2)],
            [pattern[2], pattern[1], pattern[0]],
        )
        .unwrap();
        assert!((base - permuted).abs() < 1e-12 * (1.0 + base.abs()));
    }

    #[test]
    fn montecarlo_bundle_within_three_standard_errors() {
        let p = flagship_params();
        let op = KernelOp::new(builtin_kernel(&p, "compact_cz").unwrap());
        let e = EngineOp::Kernel(&op);
        let exact_cfg = flagship_config();
        let mc_cfg = EngineConfig {
            montecarlo: Some((200, 4242)),
            ..flagship_config()
        };
        let tuples: Vec<_> = (0..2).map(|s| random_tuple(&p, 700 + s)).collect();
        let adjusted: Vec<_> = tuples
            .iter()
            .map(|(a, b, c)| (a.mean_adjusted(), b.mean_adjusted(), c.mean_adjusted()))
            .collect();
        let exact = run_stream(&e, &p, &exact_cfg, &adjusted).unwrap();
        let mc = run_stream(&e, &p, &mc_cfg, &adjusted).unwrap();
        assert_eq!(mc.grids_used, 200);
        for ((ex, m), se) in exact
            .forms
            .iter()
            .zip(&mc.forms)
            .zip(&mc.form_std_errors)
        {
            assert!(
                (ex - m).abs() <= 3.0 * se.max(1e-12),
                "mc {m} vs exact {ex} with se {se}"
            );
        }
    }

    /// A shift sum with average slots drives the paraproduct pieces with
    /// nonzero coefficients; the round trip must still be exact.
    #[test]
    fn round_trip_with_nontrivial_paraproducts() {
        let p = flagship_params();
        let grids = ProductGrid::new(
            standard_grid(&p, 1).unwrap(),
            standard_grid(&p, 2).unwrap(),
        )
        .unwrap();
        // two cancellative slots per axis on slots 1 and 2, slot 3 averaged
        let mut op = ShiftOp::new(
            grids.clone(),
            vec![(0, 0), (1, 1), (1, 0)],
            vec![(1, 1), (1, 1), (0, 0)],
        )
        .unwrap();
        let q1 = DyadicCube::new(1, 1, [1, 0, 0]);
        let q2 = DyadicCube::new(2, 1, [0, 0, 0]);
        let c1 = grids.grid1.child(&q1, 0).unwrap();
        let c2 = grids.grid2.child(&q2, 1).unwrap();
        let key = ShiftKey {
            q: (q1, q2),
            cubes: vec![(q1, q2), (c1, c2), (c1, q2)],
        };
        let cap = op.normalization(&key);
        op.insert(key, 0.6 * cap).unwrap();
        let ops = [op];
        // plus a full paraproduct with Carleson-normalized coefficients
        let mut pp = crate::modelops::FullParaproductOp::new(grids.clone(), 3, (0, 2)).unwrap();
        let r1 = DyadicCube::new(1, 0, [1, 0, 0]);
        let r2 = DyadicCube::new(2, 0, [2, 0, 0]);
        let vol = (r1.volume(&p) * r2.volume(&p)).sqrt();
        pp.coeffs.insert((r1, r2), 0.5 * vol);
        let pps = [pp];
        let e = EngineOp::Model(&ops, &pps);
        let cfg = flagship_config();
        let tuples: Vec<_> = (0..3).map(|s| random_tuple(&p, 800 + s)).collect();
        let (_, max_rel) = verify(&e, &p, &cfg, &tuples).unwrap();
        assert!(max_rel <= 1e-12, "round trip error {max_rel}");
        // the collapsed pieces carry real mass for this operator
        let bundle = assemble(&e, &p, &cfg).unwrap();
        let pp_mass: f64 = bundle
            .stats
            .iter()
            .filter(|(c, _)| c.case1 == "P" || c.case2 == "P")
            .map(|(_, st)| st.max_ratio)
            .fold(0.0, f64::max);
        assert!(pp_mass > 1e-12, "paraproduct pieces should be nontrivial, got {pp_mass}");
    }

    #[test]
    fn infeasible_goodness_is_reported() {
        // r = 2 here constrains the half-unit expansion cubes by the
        // scale-2 cubes, whose boundary threshold exceeds the torus span
        let p = LatticeParams::new(1, 1, 1, 2, true, 2).unwrap();
        let op = KernelOp::new(builtin_kernel(&p, "compact_cz").unwrap());
        let e = EngineOp::Kernel(&op);
        let err = assemble(&e, &p, &EngineConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));
    }
}
