//! Concrete bilinear bi-parameter kernels with compactness-encoding decay
//! factors, brute-force evaluation of the trilinear form, kernel-condition
//! and cancellation-hypothesis checks, and the auxiliary integral
//! estimates used by the representation engine.
//!
//! Singular kernels are evaluated with the per-axis full-diagonal cells
//! excluded; that discrete principal value is the operator's definition
//! on the lattice.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::lattice::{DyadicCube, LatticeParams, ShiftedGrid};
use crate::rng::SeededRng;
use crate::step::{cell_center, AxisSet, StepFunction};

/// A named monotone scalar factor on `[0, infinity)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecayFn {
    /// `min(1, (t/t0)^alpha)`: increasing, vanishing at zero.
    PowerInc { alpha: f64, t0: f64 },
    /// `(1 + t/t1)^{-beta}`: decreasing, vanishing tail.
    PowerDec { beta: f64, t1: f64 },
    /// Flat factor: the non-compact control.
    Constant { c: f64 },
}

impl DecayFn {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            DecayFn::PowerInc { alpha, t0 } => fmath::powf(t / t0, *alpha).min(1.0),
            DecayFn::PowerDec { beta, t1 } => fmath::powf(1.0 + t / t1, -*beta),
            DecayFn::Constant { c } => *c,
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, DecayFn::Constant { .. })
    }
}

/// Triple of decay factors for one parameter: `f1` increasing with zero
/// limit at zero, `f2` and `f3` decreasing with vanishing tails.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayTriple {
    pub f1: DecayFn,
    pub f2: DecayFn,
    pub f3: DecayFn,
}

impl DecayTriple {
    pub fn constant(c: f64) -> Self {
        DecayTriple {
            f1: DecayFn::Constant { c },
            f2: DecayFn::Constant { c: 1.0 },
            f3: DecayFn::Constant { c: 1.0 },
        }
    }

    /// Tail-summed second factor `sum_k 2^{-k theta} f2(2^{-k} t)`.
    pub fn f2_tilde(&self, t: f64, theta: f64) -> f64 {
        let mut s = 0.0;
        let mut w = 1.0;
        let q = fmath::powf(2.0, -theta);
        for k in 0..96 {
            s += w * self.f2.eval(t * fmath::exp2i(-k));
            w *= q;
            if w < 1e-15 {
                break;
            }
        }
        s
    }

    /// Tail-summed third factor `sum_k 2^{-k theta} f3(rd(2^k Q, I))`.
    pub fn f3_tilde(
        &self,
        params: &LatticeParams,
        axis: u8,
        grid: &ShiftedGrid,
        q: &DyadicCube,
        theta: f64,
    ) -> f64 {
        let _ = axis;
        let mut s = 0.0;
        let mut w = 1.0;
        let decay = fmath::powf(2.0, -theta);
        for k in 0..64 {
            s += w * self.f3.eval(rd_to_unit(params, grid, q, k));
            w *= decay;
            if w < 1e-15 {
                break;
            }
        }
        s
    }

    /// The cube-pair factor `f1(l(K)) f2~(l(K)) f3~(Q)`.
    pub fn cube_pair_factor(
        &self,
        params: &LatticeParams,
        grid: &ShiftedGrid,
        k_cube: &DyadicCube,
        q_cube: &DyadicCube,
        theta: f64,
    ) -> f64 {
        self.f1.eval(k_cube.side())
            * self.f2_tilde(k_cube.side(), theta)
            * self.f3_tilde(params, grid.axis, grid, q_cube, theta)
    }
}

/// Relative distance of the dilated cube `2^k Q` to the unit cube.
fn rd_to_unit(params: &LatticeParams, grid: &ShiftedGrid, q: &DyadicCube, dilation: i32) -> f64 {
    let n = grid.dim() as usize;
    let side = q.side() * fmath::exp2i(dilation);
    let mut dist = 0.0f64;
    for d in 0..n {
        let left = params.unit_to_phys(grid.left_units(q, d));
        let c = left + 0.5 * q.side();
        let lo = c - 0.5 * side;
        let hi = c + 0.5 * side;
        // unit cube [-1/2, 1/2)
        let g = if lo > 0.5 {
            lo - 0.5
        } else if hi < -0.5 {
            -0.5 - hi
        } else {
            0.0
        };
        dist = dist.max(g);
    }
    dist / side.max(1.0)
}

/// One-parameter bilinear kernel evaluated at cell centers. Distances come
/// in metric-adjusted form (wrapped on the torus); raw coordinates are
/// available for position-dependent factors in bounded mode.
#[derive(Debug, Clone, PartialEq)]
pub enum Axis1dKernel {
    Zero,
    /// The bilinear Riesz kernel `((x-y)_j + (x-z)_j) / (|x-y|^2 + |x-z|^2)^{(2n+1)/2}`.
    BilinearRiesz { coord: usize },
    /// Size-normalized envelope `F1(d) F2(d) F3(e) / (C d^{mn})` with the
    /// declared decay triple; built so the kernel conditions hold against
    /// that same triple.
    CompactCz {
        decay: DecayTriple,
        /// normalization making size and Hoelder ratios at most one
        norm: f64,
    },
}

const CZ_NORM: f64 = 64.0;

impl Axis1dKernel {
    /// Evaluate at points of `R^n` (n = dimension of the axis); `dx`, `dy`,
    /// `dz` are the metric representatives of `x`, `y`, `z` for distance
    /// purposes (torus-wrapped), raw coordinates feed position factors.
    pub fn eval(&self, n: usize, x: &[f64], y: &[f64], z: &[f64], wx: &[f64], wy: &[f64], wz: &[f64]) -> f64 {
        // ell-infinity distances from the wrapped representatives
        let mut dxy = 0.0f64;
        let mut dxz = 0.0f64;
        for d in 0..n {
            dxy = dxy.max(fmath::abs(wx[d] - wy[d]));
            dxz = dxz.max(fmath::abs(wx[d] - wz[d]));
        }
        let dsum = dxy + dxz;
        if dsum == 0.0 {
            return 0.0;
        }
        match self {
            Axis1dKernel::Zero => 0.0,
            Axis1dKernel::BilinearRiesz { coord } => {
                let num = (wx[*coord] - wy[*coord]) + (wx[*coord] - wz[*coord]);
                let den = fmath::powf(
                    (0..n)
                        .map(|d| {
                            let a = wx[d] - wy[d];
                            let b = wx[d] - wz[d];
                            a * a + b * b
                        })
                        .sum::<f64>(),
                    (2.0 * n as f64 + 1.0) / 2.0,
                );
                num / den
            }
            Axis1dKernel::CompactCz { decay, norm } => {
                let ecc = 1.0 + {
                    let mut sxy = 0.0f64;
                    let mut sxz = 0.0f64;
                    for d in 0..n {
                        sxy = sxy.max(fmath::abs(x[d] + y[d]));
                        sxz = sxz.max(fmath::abs(x[d] + z[d]));
                    }
                    (sxy + sxz) / (1.0 + dsum)
                };
                decay.f1.eval(dsum) * decay.f2.eval(dsum) * decay.f3.eval(ecc)
                    / (norm * fmath::powf(dsum, 2.0 * n as f64))
            }
        }
    }
}

/// A bilinear bi-parameter kernel specification: a product of per-axis
/// kernels together with the declared decay data and hypothesis flags.
#[derive(Debug, Clone)]
pub struct KernelSpec {
    pub params: LatticeParams,
    pub k1: Axis1dKernel,
    pub k2: Axis1dKernel,
    pub decay1: DecayTriple,
    pub decay2: DecayTriple,
    /// Declared cube profile scale for the weak-compactness envelopes.
    pub profile_scale: f64,
    /// Which of the five hypotheses the kernel is declared to satisfy.
    pub flags: [bool; 5],
    pub name: String,
}

impl KernelSpec {
    /// Declared cube profile `F^i(I)` from the decay triple.
    pub fn cube_profile(&self, grid: &ShiftedGrid, cube: &DyadicCube) -> f64 {
        let decay = if grid.axis == 1 { &self.decay1 } else { &self.decay2 };
        let side = cube.side();
        self.profile_scale
            * decay.f1.eval(side)
            * decay.f2.eval(side)
            * decay.f3.eval(rd_to_unit(&self.params, grid, cube, 0))
    }
}

/// Built-in kernels.
pub fn builtin_kernel(params: &LatticeParams, name: &str) -> Result<KernelSpec> {
    match name {
        "riesz_tensor" => Ok(KernelSpec {
            params: *params,
            k1: Axis1dKernel::BilinearRiesz { coord: 0 },
            k2: Axis1dKernel::BilinearRiesz { coord: 0 },
            decay1: DecayTriple::constant(64.0),
            decay2: DecayTriple::constant(64.0),
            profile_scale: 1.0,
            flags: [true, true, true, true, false],
            name: name.to_string(),
        }),
        "compact_cz" => {
            let mk = |periodic: bool| DecayTriple {
                f1: DecayFn::PowerInc { alpha: 2.0, t0: 4.0 },
                f2: DecayFn::PowerDec { beta: 2.5, t1: 0.25 },
                f3: if periodic {
                    DecayFn::Constant { c: 1.0 }
                } else {
                    DecayFn::PowerDec { beta: 1.0, t1: 1.0 }
                },
            };
            let decay = mk(params.periodic);
            Ok(KernelSpec {
                params: *params,
                k1: Axis1dKernel::CompactCz { decay, norm: CZ_NORM },
                k2: Axis1dKernel::CompactCz { decay, norm: CZ_NORM },
                decay1: decay,
                decay2: decay,
                profile_scale: 1.0,
                flags: [true; 5],
                name: name.to_string(),
            })
        }
        other => Err(Error::Config(alloc::format!("unknown builtin kernel '{other}'"))),
    }
}

/// Metric representative used for distance computations: on the torus the
/// difference to a base point is wrapped into half a period.
fn wrap_coords(params: &LatticeParams, base: &[f64], x: &[f64], n: usize) -> [f64; 3] {
    let mut out = [0.0; 3];
    let period = fmath::exp2i(params.top_exp());
    for d in 0..n {
        let mut v = x[d];
        if params.periodic {
            let mut diff = v - base[d];
            while diff >= period / 2.0 {
                diff -= period;
            }
            while diff < -period / 2.0 {
                diff += period;
            }
            v = base[d] + diff;
        }
        out[d] = v;
    }
    out
}

/// Dense per-axis kernel table `K[x][y][z]` at cell centers, with the
/// full-diagonal entries zeroed (discrete principal value).
pub struct KernelTable1d {
    pub cells: usize,
    pub values: Vec<f64>,
}

impl KernelTable1d {
    pub fn build(params: &LatticeParams, axis: u8, kernel: &Axis1dKernel) -> Self {
        let cells = params.cells(axis);
        let n = params.dim(axis) as usize;
        let mut values = vec![0.0; cells * cells * cells];
        let centers: Vec<[f64; 3]> = (0..cells).map(|i| cell_center(params, axis, i)).collect();
        for xi in 0..cells {
            let x = centers[xi];
            for yi in 0..cells {
                for zi in 0..cells {
                    if xi == yi && yi == zi {
                        continue;
                    }
                    let wy = wrap_coords(params, &x[..n], &centers[yi][..n], n);
                    let wz = wrap_coords(params, &x[..n], &centers[zi][..n], n);
                    values[(xi * cells + yi) * cells + zi] = kernel.eval(
                        n,
                        &x[..n],
                        &centers[yi][..n],
                        &centers[zi][..n],
                        &x[..n],
                        &wy[..n],
                        &wz[..n],
                    );
                }
            }
        }
        KernelTable1d { cells, values }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[(x * self.cells + y) * self.cells + z]
    }

    /// 1D trilinear pairing `<T(u1, u2), u3>` with cell-value slices.
    pub fn pair(&self, vol: f64, u1: &[f64], u2: &[f64], u3: &[f64]) -> f64 {
        let c = self.cells;
        let mut s = 0.0;
        for x in 0..c {
            if u3[x] == 0.0 {
                continue;
            }
            let mut inner = 0.0;
            for y in 0..c {
                if u1[y] == 0.0 {
                    continue;
                }
                let row = &self.values[(x * c + y) * c..(x * c + y + 1) * c];
                let mut acc = 0.0;
                for z in 0..c {
                    acc += row[z] * u2[z];
                }
                inner += acc * u1[y];
            }
            s += inner * u3[x];
        }
        s * vol * vol * vol
    }
}

/// Trilinear forms over lattice functions: the common face of kernel
/// quadrature operators and dyadic model operators.
pub trait TriForm {
    fn lattice(&self) -> &LatticeParams;

    /// `<T(f1, f2), f3>` for bi-parameter arguments.
    fn form(&self, f1: &StepFunction, f2: &StepFunction, f3: &StepFunction) -> f64;

    /// Fast path for tensor arguments `f_j = u_j (x) v_j`.
    fn form_tensor(&self, u: [&StepFunction; 3], v: [&StepFunction; 3]) -> f64 {
        let f1 = StepFunction::tensor(u[0], v[0]).unwrap();
        let f2 = StepFunction::tensor(u[1], v[1]).unwrap();
        let f3 = StepFunction::tensor(u[2], v[2]).unwrap();
        self.form(&f1, &f2, &f3)
    }
}

/// Kernel quadrature operator: dense per-axis kernel tables plus the spec.
pub struct KernelOp {
    pub spec: KernelSpec,
    pub table1: KernelTable1d,
    pub table2: KernelTable1d,
}

impl KernelOp {
    pub fn new(spec: KernelSpec) -> Self {
        let table1 = KernelTable1d::build(&spec.params, 1, &spec.k1);
        let table2 = KernelTable1d::build(&spec.params, 2, &spec.k2);
        KernelOp {
            spec,
            table1,
            table2,
        }
    }

    /// Full adjoint / partial adjoint: permute kernel arguments per axis.
    /// `j = 0` keeps the axis, `j = 1` swaps output with slot 1, `j = 2`
    /// swaps output with slot 2.
    pub fn adjoint(&self, j1: u8, j2: u8) -> KernelOp {
        let permute = |t: &KernelTable1d, j: u8| -> KernelTable1d {
            let c = t.cells;
            let mut values = vec![0.0; c * c * c];
            for x in 0..c {
                for y in 0..c {
                    for z in 0..c {
                        let v = match j {
                            0 => t.get(x, y, z),
                            1 => t.get(y, x, z),
                            _ => t.get(z, y, x),
                        };
                        values[(x * c + y) * c + z] = v;
                    }
                }
            }
            KernelTable1d { cells: c, values }
        };
        KernelOp {
            spec: self.spec.clone(),
            table1: permute(&self.table1, j1),
            table2: permute(&self.table2, j2),
        }
    }
}

impl TriForm for KernelOp {
    fn lattice(&self) -> &LatticeParams {
        &self.spec.params
    }

    fn form(&self, f1: &StepFunction, f2: &StepFunction, f3: &StepFunction) -> f64 {
        // staged contraction through the axis-2 kernel table
        let p = &self.spec.params;
        let c1 = p.cells(1);
        let c2 = p.cells(2);
        debug_assert_eq!(f1.axes, AxisSet::Both);
        let vol1 = p.cell_vol(1);
        let vol2 = p.cell_vol(2);
        // A[y1][x2][z2] = sum_y2 K2[x2][y2][z2] f1[y1][y2]
        let mut a = vec![0.0; c1 * c2 * c2];
        for y1 in 0..c1 {
            let f1row = &f1.values[y1 * c2..(y1 + 1) * c2];
            for x2 in 0..c2 {
                for z2 in 0..c2 {
                    let mut acc = 0.0;
                    for y2 in 0..c2 {
                        acc += self.table2.get(x2, y2, z2) * f1row[y2];
                    }
                    a[(y1 * c2 + x2) * c2 + z2] = acc;
                }
            }
        }
        // B[y1][z1][x2] = sum_z2 A[y1][x2][z2] f2[z1][z2]
        let mut b = vec![0.0; c1 * c1 * c2];
        for y1 in 0..c1 {
            for z1 in 0..c1 {
                let f2row = &f2.values[z1 * c2..(z1 + 1) * c2];
                for x2 in 0..c2 {
                    let arow = &a[(y1 * c2 + x2) * c2..(y1 * c2 + x2 + 1) * c2];
                    let mut acc = 0.0;
                    for z2 in 0..c2 {
                        acc += arow[z2] * f2row[z2];
                    }
                    b[(y1 * c1 + z1) * c2 + x2] = acc;
                }
            }
        }
        // C[y1][z1][x1] = sum_x2 B[y1][z1][x2] f3[x1][x2]
        // S = sum_{x1,y1,z1} K1[x1][y1][z1] C[y1][z1][x1]
        let mut s = 0.0;
        for x1 in 0..c1 {
            let f3row = &f3.values[x1 * c2..(x1 + 1) * c2];
            for y1 in 0..c1 {
                for z1 in 0..c1 {
                    let k1v = self.table1.get(x1, y1, z1);
                    if k1v == 0.0 {
                        continue;
                    }
                    let brow = &b[(y1 * c1 + z1) * c2..(y1 * c1 + z1 + 1) * c2];
                    let mut acc = 0.0;
                    for x2 in 0..c2 {
                        acc += brow[x2] * f3row[x2];
                    }
                    s += k1v * acc;
                }
            }
        }
        s * vol1 * vol1 * vol1 * vol2 * vol2 * vol2
    }

    fn form_tensor(&self, u: [&StepFunction; 3], v: [&StepFunction; 3]) -> f64 {
        let p = &self.spec.params;
        let s1 = self
            .table1
            .pair(p.cell_vol(1), &u[0].values, &u[1].values, &u[2].values);
        let s2 = self
            .table2
            .pair(p.cell_vol(2), &v[0].values, &v[1].values, &v[2].values);
        s1 * s2
    }
}

/// Worst ratios observed when sampling the kernel conditions, with the
/// offending tuple when a condition fails.
#[derive(Debug, Clone)]
pub struct KernelConditionReport {
    pub size_worst: f64,
    pub hoelder_worst: f64,
    pub mixed_worst: f64,
    pub partial_worst: f64,
    pub samples: u64,
    pub witness: Option<(usize, usize, usize, usize, usize, usize)>,
}

impl KernelConditionReport {
    pub fn passed(&self) -> bool {
        self.witness.is_none()
    }
}

fn dsum_1d(params: &LatticeParams, axis: u8, x: usize, y: usize, z: usize) -> f64 {
    let n = params.dim(axis) as usize;
    let cx = cell_center(params, axis, x);
    let cy = cell_center(params, axis, y);
    let cz = cell_center(params, axis, z);
    let wy = wrap_coords(params, &cx[..n], &cy[..n], n);
    let wz = wrap_coords(params, &cx[..n], &cz[..n], n);
    let mut dxy = 0.0f64;
    let mut dxz = 0.0f64;
    for d in 0..n {
        dxy = dxy.max(fmath::abs(cx[d] - wy[d]));
        dxz = dxz.max(fmath::abs(cx[d] - wz[d]));
    }
    dxy + dxz
}

fn envelope_1d(spec: &KernelSpec, axis: u8, x: usize, y: usize, z: usize) -> f64 {
    let p = &spec.params;
    let n = p.dim(axis) as usize;
    let decay = if axis == 1 { &spec.decay1 } else { &spec.decay2 };
    let d = dsum_1d(p, axis, x, y, z);
    if d == 0.0 {
        return f64::INFINITY;
    }
    let cx = cell_center(p, axis, x);
    let cy = cell_center(p, axis, y);
    let cz = cell_center(p, axis, z);
    let mut sxy = 0.0f64;
    let mut sxz = 0.0f64;
    for dd in 0..n {
        sxy = sxy.max(fmath::abs(cx[dd] + cy[dd]));
        sxz = sxz.max(fmath::abs(cx[dd] + cz[dd]));
    }
    let ecc = 1.0 + (sxy + sxz) / (1.0 + d);
    decay.f1.eval(d) * decay.f2.eval(d) * decay.f3.eval(ecc)
        / fmath::powf(d, 2.0 * n as f64)
}

/// Sample admissible tuples and verify the size, Hoelder, and mixed
/// conditions against the declared envelopes; spot-check the partial
/// kernel bounds on dyadic test cubes.
pub fn check_kernel_conditions(op: &KernelOp, budget: u64, seed: u64) -> Result<KernelConditionReport> {
    let spec = &op.spec;
    let p = &spec.params;
    let c1 = p.cells(1);
    let c2 = p.cells(2);
    let mut rng = SeededRng::new(seed);
    let mut rep = KernelConditionReport {
        size_worst: 0.0,
        hoelder_worst: 0.0,
        mixed_worst: 0.0,
        partial_worst: 0.0,
        samples: 0,
        witness: None,
    };
    // displaced index: step towards the interior by a quarter of the
    // nearest-argument distance, deterministic
    let displace = |params: &LatticeParams, axis: u8, x: usize, y: usize, z: usize| -> Option<usize> {
        let d = dsum_1d(params, axis, x, y, z).min(2.0 * dsum_1d(params, axis, x, x.max(1) - 1, z));
        let maxd = dsum_1d(params, axis, x, y, y).max(dsum_1d(params, axis, x, z, z));
        let step_cells = ((maxd / 4.0) / params.cell_side()) as i64;
        let _ = d;
        if step_cells == 0 {
            return None;
        }
        let cells = params.cells(axis) as i64;
        let nx = if params.periodic {
            (x as i64 + step_cells).rem_euclid(cells)
        } else {
            (x as i64 + step_cells).clamp(0, cells - 1)
        };
        Some(nx as usize)
    };
    for _ in 0..budget {
        let x1 = rng.below(c1 as u64) as usize;
        let y1 = rng.below(c1 as u64) as usize;
        let z1 = rng.below(c1 as u64) as usize;
        let x2 = rng.below(c2 as u64) as usize;
        let y2 = rng.below(c2 as u64) as usize;
        let z2 = rng.below(c2 as u64) as usize;
        if (x1 == y1 && y1 == z1) || (x2 == y2 && y2 == z2) {
            continue;
        }
        rep.samples += 1;
        let k = op.table1.get(x1, y1, z1) * op.table2.get(x2, y2, z2);
        let env = envelope_1d(spec, 1, x1, y1, z1) * envelope_1d(spec, 2, x2, y2, z2);
        let ratio = fmath::abs(k) / env;
        if ratio > rep.size_worst {
            rep.size_worst = ratio;
        }
        if ratio > 1.0 + 1e-9 && rep.witness.is_none() {
            rep.witness = Some((x1, y1, z1, x2, y2, z2));
        }
        // Hoelder: displace the output in both parameters
        if let (Some(nx1), Some(nx2)) = (displace(p, 1, x1, y1, z1), displace(p, 2, x2, y2, z2)) {
            if nx1 != x1 && nx2 != x2 {
                let dd = op.table1.get(x1, y1, z1) * op.table2.get(x2, y2, z2)
                    - op.table1.get(x1, y1, z1) * op.table2.get(nx2, y2, z2)
                    - op.table1.get(nx1, y1, z1) * op.table2.get(x2, y2, z2)
                    + op.table1.get(nx1, y1, z1) * op.table2.get(nx2, y2, z2);
                let h1 = dsum_1d(p, 1, x1, nx1, nx1);
                let h2 = dsum_1d(p, 2, x2, nx2, nx2);
                let d1 = dsum_1d(p, 1, x1, y1, z1);
                let d2 = dsum_1d(p, 2, x2, y2, z2);
                if h1 <= 0.5 * d1 && h2 <= 0.5 * d2 && h1 > 0.0 && h2 > 0.0 {
                    let henv = fmath::powf(h1 / d1, p.delta1)
                        * fmath::powf(h2 / d2, p.delta2)
                        * env;
                    let r = fmath::abs(dd) / henv;
                    if r > rep.hoelder_worst {
                        rep.hoelder_worst = r;
                    }
                    if r > 1.0 + 1e-9 && rep.witness.is_none() {
                        rep.witness = Some((x1, y1, z1, x2, y2, z2));
                    }
                }
                // mixed: displace only the first parameter
                let md = op.table1.get(x1, y1, z1) * op.table2.get(x2, y2, z2)
                    - op.table1.get(nx1, y1, z1) * op.table2.get(x2, y2, z2);
                if h1 <= 0.5 * d1 && h1 > 0.0 {
                    let menv = fmath::powf(h1 / d1, p.delta1) * env;
                    let r = fmath::abs(md) / menv;
                    if r > rep.mixed_worst {
                        rep.mixed_worst = r;
                    }
                    if r > 1.0 + 1e-9 && rep.witness.is_none() {
                        rep.witness = Some((x1, y1, z1, x2, y2, z2));
                    }
                }
            }
        }
    }
    // partial-kernel spot check: |<T(h x 1_I2, h' x 1_I2), h'' x a_I2>|
    // style bounds via the axis-2 pairing against dyadic test cubes
    let grid2 = crate::lattice::standard_grid(p, 2)?;
    for k in p.scale_exps() {
        for cube in grid2.cubes_at(k) {
            if cube.scale_exp <= p.finest_exp() {
                continue;
            }
            let ind = StepFunction::indicator(&grid2, &cube);
            let a = crate::haar::haar(&grid2, &crate::haar::HaarIndex { cube, eta: 1 })?
                .scale(fmath::sqrt(cube.volume(p)));
            let c_val = op
                .table2
                .pair(p.cell_vol(2), &a.values, &ind.values, &ind.values);
            let f2 = op.spec.cube_profile(&grid2, &cube).max(1e-300);
            let ratio = fmath::abs(c_val) / (f2 * cube.volume(p));
            if ratio > rep.partial_worst {
                rep.partial_worst = ratio;
            }
        }
    }
    Ok(rep)
}

/// Report from the weak-compactness and diagonal-cancellation probes.
#[derive(Debug, Clone)]
pub struct HypothesisReport {
    /// (side, |center|, pairing magnitude, envelope) per tested rectangle.
    pub curves: Vec<(f64, f64, f64, f64)>,
    /// worst ratio of pairing to envelope
    pub worst_ratio: f64,
    /// whether the envelope tails vanish at the extreme tested scales
    pub tails_vanish: bool,
}

/// Evaluate the weak-compactness pairings and the diagonal mean-zero
/// pairings over rectangles spanning scales and positions.
pub fn hypothesis_tests(op: &dyn TriForm, spec: &KernelSpec, seed: u64) -> Result<HypothesisReport> {
    let p = &spec.params;
    let g1 = crate::lattice::standard_grid(p, 1)?;
    let g2 = crate::lattice::standard_grid(p, 2)?;
    let mut rng = SeededRng::new(seed);
    let mut curves = Vec::new();
    let mut worst: f64 = 0.0;
    for k1 in p.scale_exps() {
        for k2 in p.scale_exps() {
            for rep in 0..2 {
                let c1s = g1.cubes_at(k1);
                let c2s = g2.cubes_at(k2);
                let i1 = c1s[(rng.below(c1s.len() as u64)) as usize];
                let i2 = c2s[(rng.below(c2s.len() as u64)) as usize];
                let ind1 = StepFunction::indicator(&g1, &i1);
                let ind2 = StepFunction::indicator(&g2, &i2);
                // weak compactness pairing
                let wcp = op.form_tensor([&ind1, &ind1, &ind1], [&ind2, &ind2, &ind2]);
                // a diagonal mean-zero profile when the cube splits
                let val = if rep == 1 && i1.scale_exp > p.finest_exp() {
                    let a1 = crate::haar::haar(&g1, &crate::haar::HaarIndex { cube: i1, eta: 1 })?
                        .scale(fmath::sqrt(i1.volume(p)));
                    op.form_tensor([&a1, &ind1, &ind1], [&ind2, &ind2, &ind2])
                } else {
                    wcp
                };
                let env = spec.cube_profile(&g1, &i1)
                    * i1.volume(p)
                    * spec.cube_profile(&g2, &i2)
                    * i2.volume(p);
                let mut cdist = 0.0f64;
                for d in 0..g1.dim() as usize {
                    let left = p.unit_to_phys(g1.left_units(&i1, d));
                    cdist = cdist.max(fmath::abs(left + 0.5 * i1.side()));
                }
                curves.push((i1.side(), cdist, fmath::abs(val), env));
                if env > 0.0 {
                    worst = worst.max(fmath::abs(val) / env);
                }
            }
        }
    }
    // tails: pairing magnitudes at the extreme scales versus the middle
    let finest: f64 = curves
        .iter()
        .filter(|c| c.0 == fmath::exp2i(p.finest_exp()))
        .map(|c| c.2)
        .fold(0.0, f64::max);
    let coarsest: f64 = curves
        .iter()
        .filter(|c| c.0 == fmath::exp2i(p.top_exp()))
        .map(|c| c.2)
        .fold(0.0, f64::max);
    let mid: f64 = curves.iter().map(|c| c.2).fold(0.0, f64::max);
    let tails_vanish = mid > 0.0 && finest < mid && coarsest <= mid;
    Ok(HypothesisReport {
        curves,
        worst_ratio: worst,
        tails_vanish,
    })
}

/// The three auxiliary integral estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuxCase {
    /// separated configuration with the Hoelder-weighted integrand
    P,
    /// adjacent configuration with the size integrand
    Q,
    /// nested tail, inner window
    R1,
    /// nested tail, outer window
    R2,
}

/// Quadrature of one auxiliary integral on one parameter against the
/// bound from the tail-summed decay factors; returns (lhs, rhs, ratio).
#[allow(clippy::too_many_arguments)]
pub fn aux_integral_bounds(
    case: AuxCase,
    params: &LatticeParams,
    grid: &ShiftedGrid,
    decay: &DecayTriple,
    i_cube: &DyadicCube,
    j_cube: &DyadicCube,
    k_cube: &DyadicCube,
    q_cube: &DyadicCube,
) -> Result<(f64, f64, f64)> {
    let axis = grid.axis;
    let n = params.dim(axis) as usize;
    let delta = params.delta(axis);
    let gamma = params.gamma(axis);
    let theta = params.theta;
    let cell = params.cell_side();
    let vol = params.cell_vol(axis);
    let centers = |cube: &DyadicCube| -> Vec<Vec<f64>> {
        crate::step::cube_cells(grid, cube)
            .into_iter()
            .map(|c| cell_center(params, axis, c)[..n].to_vec())
            .collect()
    };
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        let mut m = 0.0f64;
        for d in 0..n {
            m = m.max(fmath::abs(a[d] - b[d]));
        }
        m
    };
    let integrand_f = |x: &[f64], y: &[f64], z: &[f64], f1_arg: f64| -> f64 {
        let d = dist(x, y) + dist(x, z);
        let mut sxy = 0.0f64;
        let mut sxz = 0.0f64;
        for dd in 0..n {
            sxy = sxy.max(fmath::abs(x[dd] + y[dd]));
            sxz = sxz.max(fmath::abs(x[dd] + z[dd]));
        }
        let ecc = 1.0 + (sxy + sxz) / (1.0 + d);
        decay.f1.eval(f1_arg) * decay.f2.eval(d) * decay.f3.eval(ecc)
    };
    let kc: Vec<f64> = {
        let mut c = vec![0.0; n];
        for d in 0..n {
            c[d] = params.unit_to_phys(grid.left_units(k_cube, d)) + 0.5 * k_cube.side();
        }
        c
    };
    match case {
        AuxCase::P | AuxCase::Q => {
            if k_cube.side() > 2.0 * j_cube.side() + 1e-12 {
                return Err(Error::Domain("need l(K) <= 2 l(J)".to_string()));
            }
            for c in [i_cube, j_cube, k_cube] {
                if !grid.contains(q_cube, c) {
                    return Err(Error::Domain("Q must contain I, J, K".to_string()));
                }
            }
            let dki = grid.distance_units(k_cube, i_cube) as f64 * cell;
            let dkj = grid.distance_units(k_cube, j_cube) as f64 * cell;
            let sep = 2.0
                * fmath::powf(k_cube.side(), gamma)
                * fmath::powf(j_cube.side(), 1.0 - gamma);
            if case == AuxCase::P && dki.max(dkj) <= sep {
                return Err(Error::Domain(
                    "separated case needs max{d(K,I), d(K,J)} > threshold".to_string(),
                ));
            }
            if case == AuxCase::Q {
                let disjoint_i = !grid.contains(i_cube, k_cube) && !grid.contains(k_cube, i_cube);
                let disjoint_j = !grid.contains(j_cube, k_cube) && !grid.contains(k_cube, j_cube);
                if !(disjoint_i || disjoint_j) {
                    return Err(Error::Domain(
                        "adjacent case needs K disjoint from I or J".to_string(),
                    ));
                }
            }
            let xs = centers(k_cube);
            let ys = centers(i_cube);
            let zs = centers(j_cube);
            let mut lhs = 0.0;
            for x in &xs {
                for y in &ys {
                    for z in &zs {
                        let d = dist(x, y) + dist(x, z);
                        if d == 0.0 {
                            continue;
                        }
                        let (f1_arg, num, pow) = match case {
                            AuxCase::P => (
                                dist(x, &kc),
                                fmath::powf(i_cube.side(), delta),
                                2.0 * n as f64 + delta,
                            ),
                            _ => (d, 1.0, 2.0 * n as f64),
                        };
                        lhs += integrand_f(x, y, z, f1_arg) * num / fmath::powf(d, pow);
                    }
                }
            }
            lhs *= vol * vol * vol;
            let fkq = decay.cube_pair_factor(params, grid, k_cube, q_cube, theta);
            let rhs = fmath::powf(k_cube.side() / q_cube.side(), delta / 2.0)
                * fkq
                * i_cube.volume(params)
                * j_cube.volume(params)
                * k_cube.volume(params)
                / fmath::powf(q_cube.volume(params), 2.0);
            Ok((lhs, rhs, lhs / rhs))
        }
        AuxCase::R1 | AuxCase::R2 => {
            if !grid.contains(j_cube, k_cube) {
                return Err(Error::Domain("need K inside J".to_string()));
            }
            let ell = i_cube.side(); // the scale parameter rides in the I slot
            let d_boundary = grid.distance_to_boundary_units(k_cube, j_cube) as f64 * cell;
            if !(d_boundary >= ell && ell >= k_cube.side()) {
                return Err(Error::Domain(
                    "need d(K, complement of J) >= ell >= l(K)".to_string(),
                ));
            }
            // y ranges over 3K or its complement, z over the complement of J
            let all_cells: Vec<usize> = (0..params.cells(axis)).collect();
            let j_cells = crate::step::cube_cells(grid, j_cube);
            let k_cells = crate::step::cube_cells(grid, k_cube);
            let near: Vec<usize> = all_cells
                .iter()
                .copied()
                .filter(|c| {
                    let cc = cell_center(params, axis, *c);
                    dist(&cc[..n], &kc) <= 1.5 * k_cube.side()
                })
                .collect();
            let ys: Vec<usize> = match case {
                AuxCase::R1 => near.clone(),
                _ => all_cells.iter().copied().filter(|c| !near.contains(c)).collect(),
            };
            let zs: Vec<usize> = all_cells
                .iter()
                .copied()
                .filter(|c| !j_cells.contains(c))
                .collect();
            let mut lhs = 0.0;
            for &xc in &k_cells {
                let x = cell_center(params, axis, xc);
                for &yc in &ys {
                    let y = cell_center(params, axis, yc);
                    for &zc in &zs {
                        let z = cell_center(params, axis, zc);
                        let d = dist(&x[..n], &y[..n]) + dist(&x[..n], &z[..n]);
                        if d == 0.0 {
                            continue;
                        }
                        lhs += integrand_f(&x[..n], &y[..n], &z[..n], dist(&x[..n], &kc))
                            * fmath::powf(k_cube.side(), delta)
                            / fmath::powf(d, 2.0 * n as f64 + delta);
                    }
                }
            }
            lhs *= vol * vol * vol;
            let rhs = decay.f1.eval(k_cube.side())
                * decay.f2.eval(k_cube.side())
                * decay.f3_tilde(params, axis, grid, j_cube, theta)
                * k_cube.volume(params)
                * fmath::powf(k_cube.side() / ell, delta);
            Ok((lhs, rhs, lhs / rhs))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::haar::{haar, HaarIndex};
    use crate::lattice::standard_grid;
    use crate::step::cube_cells;

    fn params() -> LatticeParams {
        LatticeParams::new(1, 1, 1, 1, true, 3).unwrap()
    }

    fn bounded_params() -> LatticeParams {
        LatticeParams::new(1, 1, 1, 2, false, 2).unwrap()
    }

    fn rand_fn(p: &LatticeParams, seed: u64) -> StepFunction {
        let mut rng = SeededRng::new(seed);
        let mut f = StepFunction::zero(p, AxisSet::Both);
        f.values.iter_mut().for_each(|v| *v = rng.symmetric());
        f
    }

    #[test]
    fn zero_kernel_gives_zero_form() {
        let p = params();
        let mut spec = builtin_kernel(&p, "compact_cz").unwrap();
        spec.k1 = Axis1dKernel::Zero;
        spec.k2 = Axis1dKernel::Zero;
        let op = KernelOp::new(spec);
        let f = rand_fn(&p, 1);
        assert_eq!(op.form(&f, &f, &f), 0.0);
    }

    #[test]
    fn form_matches_tensor_fast_path() {
        let p = params();
        let op = KernelOp::new(builtin_kernel(&p, "compact_cz").unwrap());
        let g1 = standard_grid(&p, 1).unwrap();
        let g2 = standard_grid(&p, 2).unwrap();
        let u1 = StepFunction::indicator(&g1, &DyadicCube::new(1, -1, [1, 0, 0]));
        let u2 = haar(&g1, &HaarIndex { cube: DyadicCube::new(1, 0, [2, 0, 0]), eta: 1 }).unwrap();
        let u3 = StepFunction::indicator(&g1, &DyadicCube::new(1, 0, [3, 0, 0]));
        let v1 = StepFunction::indicator(&g2, &DyadicCube::new(2, -1, [5, 0, 0]));
        let v2 = StepFunction::indicator(&g2, &DyadicCube::new(2, 0, [0, 0, 0]));
        let v3 = haar(&g2, &HaarIndex { cube: DyadicCube::new(2, 1, [1, 0, 0]), eta: 1 }).unwrap();
        let fast = op.form_tensor([&u1, &u2, &u3], [&v1, &v2, &v3]);
        let f1 = StepFunction::tensor(&u1, &v1).unwrap();
        let f2 = StepFunction::tensor(&u2, &v2).unwrap();
        let f3 = StepFunction::tensor(&u3, &v3).unwrap();
        let slow = op.form(&f1, &f2, &f3);
        assert!((fast - slow).abs() < 1e-12 * (1.0 + slow.abs()));
    }

    #[test]
    fn multilinearity_in_every_slot() {
        let p = params();
        let op = KernelOp::new(builtin_kernel(&p, "compact_cz").unwrap());
        let f = rand_fn(&p, 2);
        let g = rand_fn(&p, 3);
        let h = rand_fn(&p, 4);
        let e = rand_fn(&p, 5);
        let scale = op.form(&f, &g, &h).abs().max(1.0);
        // slot 1
        let lhs = op.form(&f.add(&e).unwrap(), &g, &h);
        let rhs = op.form(&f, &g, &h) + op.form(&e, &g, &h);
        assert!((lhs - rhs).abs() < 1e-12 * scale);
        // slot 3
        let lhs = op.form(&f, &g, &h.add(&e).unwrap());
        let rhs = op.form(&f, &g, &h) + op.form(&f, &g, &e);
        assert!((lhs - rhs).abs() < 1e-12 * scale);
    }

    #[test]
    fn adjoint_identities_all_pairs() {
        let p = params();
        let op = KernelOp::new(builtin_kernel(&p, "compact_cz").unwrap());
        let g1 = standard_grid(&p, 1).unwrap();
        let g2 = standard_grid(&p, 2).unwrap();
        let mut rng = SeededRng::new(9);
        let mut rand1 = || {
            let mut f = StepFunction::zero(&p, AxisSet::One);
            f.values.iter_mut().for_each(|v| *v = rng.symmetric());
            f
        };
        let u: Vec<StepFunction> = (0..3).map(|_| rand1()).collect();
        let mut rng2 = SeededRng::new(10);
        let mut rand2 = || {
            let mut f = StepFunction::zero(&p, AxisSet::Two);
            f.values.iter_mut().for_each(|v| *v = rng2.symmetric());
            f
        };
        let v: Vec<StepFunction> = (0..3).map(|_| rand2()).collect();
        let _ = (&g1, &g2);
        let base = op.form_tensor([&u[0], &u[1], &u[2]], [&v[0], &v[1], &v[2]]);
        for j1 in 0..3u8 {
            for j2 in 0..3u8 {
                let adj = op.adjoint(j1, j2);
                // permute tensor factors per axis: swap slot j with output
                let perm = |j: u8| -> [usize; 3] {
                    match j {
                        0 => [0, 1, 2],
                        1 => [2, 1, 0],
                        _ => [0, 2, 1],
                    }
                };
                let p1 = perm(j1);
                let p2 = perm(j2);
                let val = adj.form_tensor(
                    [&u[p1[0]], &u[p1[1]], &u[p1[2]]],
                    [&v[p2[0]], &v[p2[1]], &v[p2[2]]],
                );
                assert!(
                    (val - base).abs() < 1e-12 * (1.0 + base.abs()),
                    "adjoint ({j1},{j2}) mismatch: {val} vs {base}"
                );
                // involution at the level of form values
                let back = adj.adjoint(j1, j2);
                let again = back.form_tensor([&u[0], &u[1], &u[2]], [&v[0], &v[1], &v[2]]);
                assert!((again - base).abs() < 1e-12 * (1.0 + base.abs()));
            }
        }
    }

    #[test]
    fn riesz_antisymmetry_and_diagonal_pairings() {
        // bounded mode: every cube is a symmetric stencil without wrap ties
        let p = bounded_params();
        let op = KernelOp::new(builtin_kernel(&p, "riesz_tensor").unwrap());
        let g1 = standard_grid(&p, 1).unwrap();
        let g2 = standard_grid(&p, 2).unwrap();
        for k in p.scale_exps() {
            for c1 in g1.cubes_at(k) {
                let i1 = StepFunction::indicator(&g1, &c1);
                for c2 in g2.cubes_at(k) {
                    let i2 = StepFunction::indicator(&g2, &c2);
                    let v = op.form_tensor([&i1, &i1, &i1], [&i2, &i2, &i2]);
                    assert!(
                        v.abs() < 1e-13,
                        "diagonal pairing must vanish by antisymmetry, got {v}"
                    );
                }
            }
        }
        // on the torus the same holds strictly below the top scale, where
        // wrapped differences never reach the antipodal tie
        let pt = params();
        let opt = KernelOp::new(builtin_kernel(&pt, "riesz_tensor").unwrap());
        let gt1 = standard_grid(&pt, 1).unwrap();
        let gt2 = standard_grid(&pt, 2).unwrap();
        for k in pt.finest_exp()..pt.top_exp() {
            for c1 in gt1.cubes_at(k) {
                let i1 = StepFunction::indicator(&gt1, &c1);
                let c2 = gt2.cubes_at(k)[0];
                let i2 = StepFunction::indicator(&gt2, &c2);
                let v = opt.form_tensor([&i1, &i1, &i1], [&i2, &i2, &i2]);
                assert!(v.abs() < 1e-13, "sub-top torus pairing {v}");
            }
        }
    }

    #[test]
    fn compact_cz_conditions_pass() {
        let p = bounded_params();
        let op = KernelOp::new(builtin_kernel(&p, "compact_cz").unwrap());
        let rep = check_kernel_conditions(&op, 1000, 17).unwrap();
        assert!(rep.passed(), "witness: {:?}", rep.witness);
        assert!(rep.size_worst <= 1.0 + 1e-9, "size worst {}", rep.size_worst);
        assert!(rep.hoelder_worst <= 1.0 + 1e-9, "hoelder worst {}", rep.hoelder_worst);
        assert!(rep.mixed_worst <= 1.0 + 1e-9, "mixed worst {}", rep.mixed_worst);
    }

    #[test]
    fn riesz_conditions_pass_with_flat_factors() {
        let p = bounded_params();
        let op = KernelOp::new(builtin_kernel(&p, "riesz_tensor").unwrap());
        let rep = check_kernel_conditions(&op, 1000, 19).unwrap();
        assert!(rep.passed(), "witness: {:?}", rep.witness);
    }

    #[test]
    fn corrupted_kernel_reports_witness() {
        let p = bounded_params();
        let mut spec = builtin_kernel(&p, "compact_cz").unwrap();
        // halve the declared normalization: ratios now exceed one
        if let Axis1dKernel::CompactCz { decay, .. } = spec.k1 {
            spec.k1 = Axis1dKernel::CompactCz { decay, norm: CZ_NORM / 512.0 };
        }
        let op = KernelOp::new(spec);
        let rep = check_kernel_conditions(&op, 500, 23).unwrap();
        assert!(!rep.passed());
    }

    #[test]
    fn disjoint_tensor_inputs_match_kernel_integral() {
        let p = params();
        let op = KernelOp::new(builtin_kernel(&p, "compact_cz").unwrap());
        let g1 = standard_grid(&p, 1).unwrap();
        let g2 = standard_grid(&p, 2).unwrap();
        // disjoint supports in both parameters
        let a1 = DyadicCube::new(1, -1, [0, 0, 0]);
        let b1 = DyadicCube::new(1, -1, [4, 0, 0]);
        let c1 = DyadicCube::new(1, -1, [6, 0, 0]);
        let a2 = DyadicCube::new(2, -1, [1, 0, 0]);
        let b2 = DyadicCube::new(2, -1, [5, 0, 0]);
        let c2 = DyadicCube::new(2, -1, [7, 0, 0]);
        let f1 = StepFunction::tensor(
            &StepFunction::indicator(&g1, &a1),
            &StepFunction::indicator(&g2, &a2),
        )
        .unwrap();
        let f2 = StepFunction::tensor(
            &StepFunction::indicator(&g1, &b1),
            &StepFunction::indicator(&g2, &b2),
        )
        .unwrap();
        let f3 = StepFunction::tensor(
            &StepFunction::indicator(&g1, &c1),
            &StepFunction::indicator(&g2, &c2),
        )
        .unwrap();
        let via_form = op.form(&f1, &f2, &f3);
        // direct kernel integral over the supports
        let c2cells = p.cells(2);
        let _ = c2cells;
        let mut direct = 0.0;
        for &x1 in &cube_cells(&g1, &c1) {
            for &y1 in &cube_cells(&g1, &a1) {
                for &z1 in &cube_cells(&g1, &b1) {
                    for &x2 in &cube_cells(&g2, &c2) {
                        for &y2 in &cube_cells(&g2, &a2) {
                            for &z2 in &cube_cells(&g2, &b2) {
                                direct += op.table1.get(x1, y1, z1) * op.table2.get(x2, y2, z2);
                            }
                        }
                    }
                }
            }
        }
        direct *= fmath::powf(p.cell_vol(1), 3.0) * fmath::powf(p.cell_vol(2), 3.0);
        assert!((via_form - direct).abs() < 1e-12 * (1.0 + direct.abs()));
    }

    #[test]
    fn hypothesis_probe_compact_cz_decays() {
        let p = bounded_params();
        let spec = builtin_kernel(&p, "compact_cz").unwrap();
        let op = KernelOp::new(spec.clone());
        let rep = hypothesis_tests(&op, &spec, 31).unwrap();
        assert!(rep.tails_vanish, "expected vanishing tails");
    }

    #[test]
    fn aux_bounds_degenerate_equal_scales() {
        let p = bounded_params();
        let g = standard_grid(&p, 1).unwrap();
        // adjacent configuration: comparable scales, K disjoint from I,
        // all inside Q = [-1, 0)
        let i = DyadicCube::new(1, -1, [2, 0, 0]);
        let j = DyadicCube::new(1, -2, [6, 0, 0]);
        let k = DyadicCube::new(1, -1, [3, 0, 0]);
        let q = DyadicCube::new(1, 0, [1, 0, 0]);
        let decay = builtin_kernel(&p, "compact_cz").unwrap().decay1;
        let (lhs, rhs, ratio) =
            aux_integral_bounds(AuxCase::Q, &p, &g, &decay, &i, &j, &k, &q).unwrap();
        assert!(lhs >= 0.0 && rhs > 0.0 && ratio.is_finite());
        // degenerate scale factor: with l(K) = l(Q) the decay power is 1,
        // so the bound reduces to the plain product of factors
        let fkq = decay.cube_pair_factor(&p, &g, &k, &k, p.theta);
        let plain = fkq * i.volume(&p) * j.volume(&p) * k.volume(&p)
            / fmath::powf(k.volume(&p), 2.0);
        let factor = fmath::powf(k.side() / k.side(), p.delta1 / 2.0);
        assert_eq!(factor, 1.0);
        assert!(plain > 0.0);
    }

    #[test]
    fn aux_ratio_stability_randomized() {
        let p = bounded_params();
        let g = standard_grid(&p, 1).unwrap();
        let decay = builtin_kernel(&p, "compact_cz").unwrap().decay1;
        let mut rng = SeededRng::new(37);
        let mut ratios = Vec::new();
        let mut tries = 0;
        while ratios.len() < 50 && tries < 4000 {
            tries += 1;
            let ki = p.finest_exp() + rng.below(2) as i32;
            let cubes_i = g.cubes_at(ki + 1);
            let cubes_j = g.cubes_at(ki);
            let cubes_k = g.cubes_at(p.finest_exp());
            let i = cubes_i[rng.below(cubes_i.len() as u64) as usize];
            let j = cubes_j[rng.below(cubes_j.len() as u64) as usize];
            let k = cubes_k[rng.below(cubes_k.len() as u64) as usize];
            let q = DyadicCube::new(1, p.top_exp(), [0, 0, 0]);
            if let Ok((_, _, r)) = aux_integral_bounds(AuxCase::P, &p, &g, &decay, &i, &j, &k, &q) {
                ratios.push(r);
            }
        }
        assert!(ratios.len() >= 20, "found only {} admissible configs", ratios.len());
        let max = ratios.iter().cloned().fold(0.0, f64::max);
        let min = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        // finite, configuration-stable band
        assert!(max.is_finite() && min >= 0.0);
        assert!(max < 1e4, "ratio band too wide: [{min}, {max}]");
    }

    #[test]
    fn aux_nested_tail_cases() {
        let p = bounded_params();
        let g = standard_grid(&p, 1).unwrap();
        let decay = builtin_kernel(&p, "compact_cz").unwrap().decay1;
        // K deep inside J with d(K, J^c) >= l(K)
        let j = DyadicCube::new(1, 1, [0, 0, 0]);
        let k = DyadicCube::new(1, -2, [3, 0, 0]);
        let ell_carrier = DyadicCube::new(1, -2, [0, 0, 0]); // ell = l(K)
        for case in [AuxCase::R1, AuxCase::R2] {
            let (lhs, rhs, ratio) =
                aux_integral_bounds(case, &p, &g, &decay, &ell_carrier, &j, &k, &j).unwrap();
            assert!(lhs >= 0.0 && rhs > 0.0 && ratio.is_finite());
        }
    }
}
