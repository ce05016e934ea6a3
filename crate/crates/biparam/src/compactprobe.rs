//! Riesz-Kolmogorov compactness functionals at desk scale, operator
//! probes, and the tensor non-compactness demonstration.
//!
//! The criteria quantify over infinite sets; a finite lattice certifies
//! witnesses and controls only. Families are finite samples, and the
//! radius ladders decide where the limits are judged: a ladder ending
//! below the cell size realizes the `r -> 0` limit exactly (the only
//! available translation is zero), while a ladder ending at the cell size
//! judges the family at the resolution floor, which is where genuinely
//! rough families stay bounded below.

use alloc::format;
use alloc::string::String;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::kernels::{KernelOp, KernelTable1d};
use crate::step::{cell_center, AxisSet, StepFunction};
use crate::weights::{weighted_norm_measure, Weight};

/// Verdict of a compactness probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    ConsistentWithCompact,
    FailsTail,
    FailsOscillation,
}

/// Oscillation functional selector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RkVariant {
    /// averaged translation continuity with inner exponent `a`
    WeightedAveraged { a: f64 },
    /// ball-average oscillation `f - <f>_{B(., r)}`
    BallAverage,
    /// plain translation continuity
    Translation,
}

/// Curves and verdict of one probe run.
#[derive(Debug, Clone)]
pub struct CompactnessReport {
    pub uniform_bound: f64,
    /// `(A, sup over the family of the tail norm outside B(0, A))`
    pub tail_curve: Vec<(f64, f64)>,
    /// `(r, sup over the family of the oscillation functional)`
    pub oscillation_curve: Vec<(f64, f64)>,
    pub verdict: Verdict,
    pub settings: String,
}

/// Sum-metric ball membership: `|y1 - x1| + |y2 - x2| < r` with the
/// per-parameter distances in the maximum metric.
fn in_ball(p: &crate::lattice::LatticeParams, c1: usize, c2: usize, x: (f64, f64), r: f64) -> bool {
    let y1 = cell_center(p, 1, c1)[0];
    let y2 = cell_center(p, 2, c2)[0];
    fmath::abs(y1 - x.0) + fmath::abs(y2 - x.1) < r
}

/// Translate a bi-parameter function by whole cells, zero-filling outside
/// the bounded domain.
fn translate(f: &StepFunction, d1: i64, d2: i64) -> StepFunction {
    let p = &f.params;
    let c1 = p.cells(1) as i64;
    let c2 = p.cells(2) as i64;
    let mut out = StepFunction::zero(p, AxisSet::Both);
    for i1 in 0..c1 {
        let s1 = i1 - d1;
        if s1 < 0 || s1 >= c1 {
            continue;
        }
        for i2 in 0..c2 {
            let s2 = i2 - d2;
            if s2 < 0 || s2 >= c2 {
                continue;
            }
            out.values[(i1 * c2 + i2) as usize] = f.values[(s1 * c2 + s2) as usize];
        }
    }
    out
}

/// Compute the three Riesz-Kolmogorov functionals of a finite family.
pub fn rk_functionals(
    family: &[StepFunction],
    p_exp: f64,
    w: &Weight,
    a_ladder: &[f64],
    r_ladder: &[f64],
    variant: RkVariant,
    tolerance: f64,
) -> Result<CompactnessReport> {
    if family.is_empty() {
        return Err(Error::Domain("empty family".to_string()));
    }
    let params = &family[0].params;
    if let RkVariant::WeightedAveraged { a } = variant {
        if !(a > 0.0 && a <= 1.0) {
            return Err(Error::Domain("inner exponent must lie in (0, 1]".to_string()));
        }
    }
    let c1 = params.cells(1);
    let c2 = params.cells(2);
    let cell = params.cell_side();
    let mut uniform: f64 = 0.0;
    for f in family {
        uniform = uniform.max(weighted_norm_measure(f, p_exp, w)?);
    }
    // tails
    let mut tail_curve = Vec::with_capacity(a_ladder.len());
    for &a_val in a_ladder {
        let mut sup: f64 = 0.0;
        for f in family {
            let mut masked = f.clone();
            for i1 in 0..c1 {
                for i2 in 0..c2 {
                    if in_ball(params, i1, i2, (0.0, 0.0), a_val) {
                        masked.values[i1 * c2 + i2] = 0.0;
                    }
                }
            }
            sup = sup.max(weighted_norm_measure(&masked, p_exp, w)?);
        }
        tail_curve.push((a_val, sup));
    }
    // oscillation
    let mut oscillation_curve = Vec::with_capacity(r_ladder.len());
    for &r in r_ladder {
        let reach = (r / cell) as i64 + 1;
        let mut offsets = Vec::new();
        for d1 in -reach..=reach {
            for d2 in -reach..=reach {
                let dist = (fmath::abs(d1 as f64) + fmath::abs(d2 as f64)) * cell;
                if dist < r && (d1, d2) != (0, 0) {
                    offsets.push((d1, d2));
                }
            }
        }
        let mut sup: f64 = 0.0;
        for f in family {
            let v = match variant {
                RkVariant::Translation => {
                    let mut worst: f64 = 0.0;
                    for &(d1, d2) in &offsets {
                        let diff = translate(f, d1, d2).sub(f)?;
                        worst = worst.max(weighted_norm_measure(&diff, p_exp, w)?);
                    }
                    worst
                }
                RkVariant::WeightedAveraged { a } => {
                    if offsets.is_empty() {
                        0.0
                    } else {
                        // pointwise ( avg over y in B(0,r) of |t_y f - f|^a )^{1/a},
                        // with the zero offset participating as in the ball
                        let mut acc = StepFunction::zero(params, AxisSet::Both);
                        let count = (offsets.len() + 1) as f64;
                        for &(d1, d2) in &offsets {
                            let diff = translate(f, d1, d2).sub(f)?;
                            for (o, v) in acc.values.iter_mut().zip(&diff.values) {
                                *o += fmath::powf(fmath::abs(*v), a);
                            }
                        }
                        acc.values
                            .iter_mut()
                            .for_each(|v| *v = fmath::powf(*v / count, 1.0 / a));
                        weighted_norm_measure(&acc, p_exp, w)?
                    }
                }
                RkVariant::BallAverage => {
                    let mut osc = StepFunction::zero(params, AxisSet::Both);
                    for i1 in 0..c1 {
                        for i2 in 0..c2 {
                            let x1 = cell_center(params, 1, i1)[0];
                            let x2 = cell_center(params, 2, i2)[0];
                            let mut sum = 0.0;
                            let mut n = 0usize;
                            for j1 in 0..c1 {
                                for j2 in 0..c2 {
                                    let y1 = cell_center(params, 1, j1)[0];
                                    let y2 = cell_center(params, 2, j2)[0];
                                    if fmath::abs(y1 - x1) + fmath::abs(y2 - x2) < r.max(cell) {
                                        sum += f.values[j1 * c2 + j2];
                                        n += 1;
                                    }
                                }
                            }
                            let avg = sum / n as f64;
                            osc.values[i1 * c2 + i2] = f.values[i1 * c2 + i2] - avg;
                        }
                    }
                    weighted_norm_measure(&osc, p_exp, w)?
                }
            };
            sup = sup.max(v);
        }
        oscillation_curve.push((r, sup));
    }
    let tail_final = tail_curve.last().map(|x| x.1).unwrap_or(0.0);
    let osc_final = oscillation_curve.last().map(|x| x.1).unwrap_or(0.0);
    let verdict = if tail_final > tolerance {
        Verdict::FailsTail
    } else if osc_final > tolerance {
        Verdict::FailsOscillation
    } else {
        Verdict::ConsistentWithCompact
    };
    Ok(CompactnessReport {
        uniform_bound: uniform,
        tail_curve,
        oscillation_curve,
        verdict,
        settings: format!(
            "variant {:?}, p = {p_exp}, family of {}, tolerance {tolerance:e}; \
             a probe is evidence, not proof",
            variant,
            family.len()
        ),
    })
}

/// Structured sampler of unit-ball functions: random signs, Haar-sparse
/// vectors, and extremal bumps, normalized in the requested weighted norm.
pub fn sample_unit_ball(
    params: &crate::lattice::LatticeParams,
    p_exp: f64,
    w: &Weight,
    count: usize,
    seed: u64,
) -> Result<Vec<StepFunction>> {
    let mut rng = crate::rng::SeededRng::new(seed);
    let c1 = params.cells(1);
    let c2 = params.cells(2);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut f = StepFunction::zero(params, AxisSet::Both);
        match i % 3 {
            0 => {
                f.values.iter_mut().for_each(|v| *v = rng.symmetric());
            }
            1 => {
                for _ in 0..4 {
                    let cell = rng.below((c1 * c2) as u64) as usize;
                    f.values[cell] = rng.symmetric();
                }
            }
            _ => {
                let w1 = 1 + rng.below(c1 as u64 / 2) as usize;
                let w2 = 1 + rng.below(c2 as u64 / 2) as usize;
                let o1 = rng.below((c1 - w1) as u64) as usize;
                let o2 = rng.below((c2 - w2) as u64) as usize;
                for i1 in o1..o1 + w1 {
                    for i2 in o2..o2 + w2 {
                        f.values[i1 * c2 + i2] = 1.0;
                    }
                }
            }
        }
        let n = weighted_norm_measure(&f, p_exp, w)?;
        if n > 0.0 {
            out.push(f.scale(1.0 / n));
        }
    }
    Ok(out)
}

/// Apply a probe operator to sampled unit-ball tuples and run the
/// functionals on the image family. A probe is evidence, not proof; the
/// report says so.
#[allow(clippy::too_many_arguments)]
pub fn probe_operator<F>(
    params: &crate::lattice::LatticeParams,
    mut apply: F,
    p_exps: (f64, f64),
    w: &Weight,
    samples: usize,
    seed: u64,
    a_ladder: &[f64],
    r_ladder: &[f64],
    tolerance: f64,
) -> Result<CompactnessReport>
where
    F: FnMut(&StepFunction, &StepFunction) -> Result<StepFunction>,
{
    let fs1 = sample_unit_ball(params, p_exps.0, w, samples, seed)?;
    let fs2 = sample_unit_ball(params, p_exps.1, w, samples, seed ^ 0x9e3779b97f4a7c15)?;
    let mut family = Vec::new();
    for (f1, f2) in fs1.iter().zip(&fs2) {
        family.push(apply(f1, f2)?);
    }
    let p_out = 1.0 / (1.0 / p_exps.0 + 1.0 / p_exps.1);
    rk_functionals(
        &family,
        p_out,
        w,
        a_ladder,
        r_ladder,
        RkVariant::Translation,
        tolerance,
    )
}

/// 1D bilinear application through a kernel table.
pub fn apply_1d(table: &KernelTable1d, vol: f64, u: &[f64], v: &[f64]) -> Vec<f64> {
    let c = table.cells;
    let mut out = vec![0.0; c];
    for x in 0..c {
        let mut s = 0.0;
        for y in 0..c {
            if u[y] == 0.0 {
                continue;
            }
            for z in 0..c {
                s += table.get(x, y, z) * u[y] * v[z];
            }
        }
        out[x] = s * vol * vol;
    }
    out
}

/// Bi-parameter application of a product-kernel operator.
pub fn apply_kernel_op(op: &KernelOp, f1: &StepFunction, f2: &StepFunction) -> Result<StepFunction> {
    let p = &op.spec.params;
    let c1 = p.cells(1);
    let c2 = p.cells(2);
    let vol1 = p.cell_vol(1);
    let vol2 = p.cell_vol(2);
    // A[x2][y1][z1] = sum_{y2,z2} K2(x2,y2,z2) f1[y1][y2] f2[z1][z2]
    let mut a = vec![0.0; c2 * c1 * c1];
    for x2 in 0..c2 {
        for y1 in 0..c1 {
            for z1 in 0..c1 {
                let mut s = 0.0;
                for y2 in 0..c2 {
                    let f1v = f1.values[y1 * c2 + y2];
                    if f1v == 0.0 {
                        continue;
                    }
                    for z2 in 0..c2 {
                        s += op.table2.get(x2, y2, z2) * f1v * f2.values[z1 * c2 + z2];
                    }
                }
                a[(x2 * c1 + y1) * c1 + z1] = s;
            }
        }
    }
    let mut out = StepFunction::zero(p, AxisSet::Both);
    for x1 in 0..c1 {
        for x2 in 0..c2 {
            let mut s = 0.0;
            for y1 in 0..c1 {
                for z1 in 0..c1 {
                    let k1 = op.table1.get(x1, y1, z1);
                    if k1 != 0.0 {
                        s += k1 * a[(x2 * c1 + y1) * c1 + z1];
                    }
                }
            }
            out.values[x1 * c2 + x2] = s * vol1 * vol1 * vol2 * vol2;
        }
    }
    Ok(out)
}

/// Outcome of the tensor non-compactness demonstration.
#[derive(Debug, Clone)]
pub struct TensorDemo {
    /// norm of the fixed-factor image
    pub a0: f64,
    /// pairwise distances of the one-parameter images
    pub factor_distances: Vec<f64>,
    /// pairwise distances of the product images
    pub image_distances: Vec<f64>,
    /// worst deviation from `image = a0 * factor`
    pub identity_error: f64,
    pub min_pairwise: f64,
    pub applicable: bool,
}

/// Construct the witness family `f_k (x) g` for a product operator and
/// exhibit the non-Cauchy image sequence: product-image distances equal
/// the fixed-factor norm times the one-parameter distances.
pub fn tensor_noncompact_demo(
    op: &KernelOp,
    p_exp: f64,
    g1: &StepFunction,
    g2: &StepFunction,
    fks: &[(StepFunction, StepFunction)],
) -> Result<TensorDemo> {
    let p = &op.spec.params;
    if p.periodic {
        return Err(Error::Domain("the demo runs on the bounded lattice".to_string()));
    }
    let vol2 = p.cell_vol(2);
    let t2g = apply_1d(&op.table2, vol2, &g1.values, &g2.values);
    let a0 = {
        let mut s = 0.0;
        for v in &t2g {
            s += fmath::powf(fmath::abs(*v), p_exp);
        }
        fmath::powf(s * vol2, 1.0 / p_exp)
    };
    if a0 <= 1e-14 {
        return Ok(TensorDemo {
            a0,
            factor_distances: vec![],
            image_distances: vec![],
            identity_error: 0.0,
            min_pairwise: 0.0,
            applicable: false,
        });
    }
    let vol1 = p.cell_vol(1);
    let images1: Vec<Vec<f64>> = fks
        .iter()
        .map(|(u, v)| apply_1d(&op.table1, vol1, &u.values, &v.values))
        .collect();
    let lp1 = |v: &[f64]| -> f64 {
        let s: f64 = v.iter().map(|x| fmath::powf(fmath::abs(*x), p_exp)).sum();
        fmath::powf(s * vol1, 1.0 / p_exp)
    };
    let mut factor_distances = Vec::new();
    let mut image_distances = Vec::new();
    let mut identity_error: f64 = 0.0;
    let mut min_pairwise = f64::INFINITY;
    for i in 0..fks.len() {
        for j in (i + 1)..fks.len() {
            let diff1: Vec<f64> = images1[i]
                .iter()
                .zip(&images1[j])
                .map(|(a, b)| a - b)
                .collect();
            let d1 = lp1(&diff1);
            factor_distances.push(d1);
            let full_i = apply_kernel_op(
                op,
                &StepFunction::tensor(&fks[i].0, g1)?,
                &StepFunction::tensor(&fks[i].1, g2)?,
            )?;
            let full_j = apply_kernel_op(
                op,
                &StepFunction::tensor(&fks[j].0, g1)?,
                &StepFunction::tensor(&fks[j].1, g2)?,
            )?;
            let d_full = full_i.sub(&full_j)?.lp_norm(p_exp);
            image_distances.push(d_full);
            identity_error = identity_error.max(fmath::abs(d_full - a0 * d1));
            min_pairwise = min_pairwise.min(d_full);
        }
    }
    Ok(TensorDemo {
        a0,
        factor_distances,
        image_distances,
        identity_error,
        min_pairwise,
        applicable: true,
    })
}
