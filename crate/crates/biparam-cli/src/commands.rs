//! Subcommand drivers: each runs one module pipeline against the parsed
//! config and writes machine-readable artifacts.
//!
//! Exit codes: 0 when all hard assertions pass, 2 on an assertion failure
//! (witness files are still written), 1 on configuration errors (handled
//! by the caller).

use std::collections::BTreeMap;
use std::error::Error;

use serde_json::json;

use biparam::compactprobe::{
    apply_kernel_op, probe_operator, rk_functionals, sample_unit_ball, tensor_noncompact_demo,
    RkVariant, Verdict,
};
use biparam::haar::{
    expand_1d, haar, martingale, project_n, reconstruct_1d, Basis1d, HaarIndex, Martingale, Slot,
};
use biparam::kernels::{builtin_kernel, check_kernel_conditions, hypothesis_tests, KernelOp};
use biparam::lattice::{
    count_dn, enumerate_grid, is_good, pi_good_table, standard_grid, DyadicCube, PiGood,
    ProductGrid,
};
use biparam::modelops::{ShiftKey, ShiftOp};
use biparam::oscillation::{bmo_norm, carleson_check, carleson_embed, cmo_defect, BmoFlavor, CarlesonFamily, UFamily};
use biparam::representation::{assemble, decay_report, verify, EngineConfig, EngineOp};
use biparam::rng::SeededRng;
use biparam::step::{AxisSet, StepFunction};
use biparam::weights::{
    ap_constant, interpolate_weights, multilinear_ap_constant, strong_maximal, Exponent,
    RectFamily, Weight, WeightVector,
};
use biparam::LatticeParams;

use crate::artifacts::{config_json, fmt_f64, json_f64, Csv, OutDir};
use crate::config::Config;

pub type CmdResult = Result<i32, Box<dyn Error>>;

fn seeded(cfg: &Config, seed_override: Option<u64>) -> Result<u64, Box<dyn Error>> {
    Ok(match seed_override {
        Some(s) => s,
        None => cfg.get_i64("run.seed", 1)? as u64,
    })
}

fn random_fn(p: &LatticeParams, axes: AxisSet, rng: &mut SeededRng) -> StepFunction {
    let mut f = StepFunction::zero(p, axes);
    f.values.iter_mut().for_each(|v| *v = rng.symmetric());
    f
}

fn weight_from_spec(cfg: &Config, prefix: &str, p: &LatticeParams, seed: u64) -> Result<Weight, Box<dyn Error>> {
    let kind = cfg.get(&format!("{prefix}.kind")).unwrap_or("one");
    match kind {
        "one" => Ok(Weight::one(p)),
        "twolevel" => {
            let hi = cfg.get_f64(&format!("{prefix}.high"), 2.0)?;
            let mut w = StepFunction::constant(p, AxisSet::Both, 1.0);
            let c1 = p.cells(1);
            let c2 = p.cells(2);
            for i1 in 0..c1 / 2 {
                for i2 in 0..c2 {
                    w.values[i1 * c2 + i2] = hi;
                }
            }
            Ok(Weight::new(w)?)
        }
        "random" => {
            let mut rng = SeededRng::new(seed);
            let spread = cfg.get_f64(&format!("{prefix}.spread"), 4.0)?;
            let mut w = StepFunction::zero(p, AxisSet::Both);
            w.values
                .iter_mut()
                .for_each(|v| *v = 1.0 / spread + rng.uniform() * spread);
            Ok(Weight::new(w)?)
        }
        other => Err(format!("unknown weight kind '{other}'").into()),
    }
}

fn exponent_from_str(s: &str) -> Result<Exponent, Box<dyn Error>> {
    if s == "inf" {
        return Ok(Exponent::Infinity);
    }
    if let Some((a, b)) = s.split_once('/') {
        return Ok(Exponent::finite(a.trim().parse()?, b.trim().parse()?));
    }
    Ok(Exponent::finite(s.trim().parse()?, 1))
}

/// Haar suite: orthonormality, reconstruction, averaging and difference
/// identities, telescoping, Parseval.
pub fn haar_check(cfg: &Config, out: &OutDir, seed: Option<u64>) -> CmdResult {
    let p = cfg.lattice()?;
    let seed = seeded(cfg, seed)?;
    let trials = cfg.get_i64("run.trials", 20)? as u64;
    let tol = cfg.get_f64("run.tolerance", 1e-12)?;
    let g1 = standard_grid(&p, 1)?;
    let g2 = standard_grid(&p, 2)?;
    let grids = ProductGrid::new(g1.clone(), g2.clone())?;
    let mut rng = SeededRng::new(seed);

    // orthonormality over all cancellative pairs plus the mean slot
    let basis = Basis1d::new(&g1);
    let fns: Vec<StepFunction> = basis
        .slots
        .iter()
        .map(|s| match s {
            Slot::Mean => {
                let vol = 2f64.powi(p.top_exp());
                StepFunction::constant(&p, AxisSet::One, vol.powf(-0.5))
            }
            Slot::Haar(h) => haar(&g1, h).unwrap(),
        })
        .collect();
    let mut ortho_err: f64 = 0.0;
    for (i, a) in fns.iter().enumerate() {
        for (j, b) in fns.iter().enumerate() {
            let want = if i == j { 1.0 } else { 0.0 };
            ortho_err = ortho_err.max((a.inner(b)? - want).abs());
        }
    }

    // reconstruction and Parseval
    let mut recon_err: f64 = 0.0;
    let mut parseval_err: f64 = 0.0;
    for _ in 0..trials {
        let f = random_fn(&p, AxisSet::One, &mut rng);
        let table = expand_1d(&f, &g1)?;
        let back = reconstruct_1d(&table, &g1)?;
        recon_err = recon_err.max(f.sub(&back)?.sup_norm());
        let sq: f64 =
            table.coeffs.values().map(|v| v * v).sum::<f64>() + table.mean * table.mean;
        parseval_err = parseval_err.max((f.inner(&f)? - sq).abs());
    }

    // averaging/difference identities with the explicit mean term
    let mut ed_err: f64 = 0.0;
    for _ in 0..trials.min(8) {
        let f = random_fn(&p, AxisSet::One, &mut rng);
        let mean = f.integral() / 2f64.powi(p.top_exp());
        for k in (p.finest_exp() + 1)..=p.top_exp() {
            let e = martingale(&f, &g1, Martingale::AvgAtScale(k))?;
            let mut sum = StepFunction::constant(&p, AxisSet::One, mean);
            for s in (k + 1)..=p.top_exp() {
                sum = sum.add(&martingale(&f, &g1, Martingale::DiffAtScale(s))?)?;
            }
            // E at scale k gathers every coarser difference plus the mean
            let k_diff = martingale(&f, &g1, Martingale::DiffAtScale(k))?;
            let e_fine = martingale(&f, &g1, Martingale::AvgAtScale(k - 1))?;
            ed_err = ed_err.max(e.add(&k_diff)?.sub(&e_fine)?.sup_norm());
            let mut dsum = StepFunction::zero(&p, AxisSet::One);
            for cube in g1.cubes_at(k) {
                dsum = dsum.add(&martingale(&f, &g1, Martingale::Delta(cube))?)?;
            }
            ed_err = ed_err.max(dsum.sub(&k_diff)?.sup_norm());
            ed_err = ed_err.max(sum.sub(&e)?.sup_norm());
        }
    }

    // parent-child telescoping
    let mut tele_err: f64 = 0.0;
    let ga = random_fn(&p, AxisSet::One, &mut rng);
    let gb = random_fn(&p, AxisSet::One, &mut rng);
    for k in p.finest_exp()..p.top_exp() {
        for cube in g1.cubes_at(k) {
            let parent = g1.parent(&cube).unwrap();
            let h = haar(&g1, &HaarIndex { cube: parent, eta: 1 })?;
            let havg = h.average_on(&g1, &cube)?;
            let lhs = (ga.inner(&h)? * gb.average_on(&g1, &cube)?
                + ga.average_on(&g1, &parent)? * gb.inner(&h)?)
                * havg;
            let rhs = ga.average_on(&g1, &cube)? * gb.average_on(&g1, &cube)?
                - ga.average_on(&g1, &parent)? * gb.average_on(&g1, &parent)?;
            tele_err = tele_err.max((lhs - rhs).abs());
        }
    }

    // bi-parameter round trip and projection bookkeeping
    let mut round2d = 0.0f64;
    let f2d = random_fn(&p, AxisSet::Both, &mut rng);
    let table2 = biparam::haar::expand_2d(&f2d, &grids)?;
    let back2 = biparam::haar::reconstruct_2d(&table2, &grids)?;
    round2d = round2d.max(f2d.sub(&back2)?.sup_norm());
    let (pn, pnp) = project_n(&f2d, &grids, 1)?;
    let (pn2, _) = project_n(&pn, &grids, 1)?;
    round2d = round2d.max(pn.sub(&pn2)?.sup_norm());
    let norm_ok = pnp.l2_norm() <= f2d.l2_norm() + tol;

    let worst = ortho_err
        .max(recon_err)
        .max(parseval_err)
        .max(ed_err)
        .max(tele_err)
        .max(round2d);
    let pass = worst <= tol && norm_ok;
    let report = json!({
        "config": config_json(cfg),
        "orthonormality": json_f64(ortho_err),
        "reconstruction": json_f64(recon_err),
        "parseval": json_f64(parseval_err),
        "averaging_identities": json_f64(ed_err),
        "telescoping": json_f64(tele_err),
        "biparameter_roundtrip": json_f64(round2d),
        "projection_norm_bounded": norm_ok,
        "tolerance": json_f64(tol),
        "pass": pass,
    });
    out.write("haar_check.json", &serde_json::to_string_pretty(&report)?)?;
    out.sidecar("haar-check", seed)?;
    Ok(if pass { 0 } else { 2 })
}

fn omega_hex(omega: &[u8]) -> String {
    omega.iter().map(|c| format!("{c:x}")).collect()
}

/// Grid suite: tiling, goodness census, goodness probabilities, and the
/// truncation cardinality bound.
pub fn grid_census(cfg: &Config, out: &OutDir, seed: Option<u64>) -> CmdResult {
    let p = cfg.lattice()?;
    let seed = seeded(cfg, seed)?;
    let omega = match cfg.get("grid.omega") {
        Some(hex) => hex
            .chars()
            .map(|c| c.to_digit(16).map(|d| d as u8).ok_or("bad omega hex digit"))
            .collect::<Result<Vec<u8>, _>>()?,
        None => vec![0u8; p.shift_components()],
    };
    let g = enumerate_grid(&p, 1, &omega)?;
    let mut pass = true;
    // tiling exactness per scale
    let mut tiling_err: f64 = 0.0;
    for k in p.scale_exps() {
        let total: f64 = g.cubes_at(k).iter().map(|c| c.volume(&p)).sum();
        tiling_err = tiling_err.max((total - 2f64.powi(p.top_exp() * p.n1 as i32)).abs());
    }
    if p.periodic && tiling_err > 1e-12 {
        pass = false;
    }
    // census
    let mut good_count = BTreeMap::new();
    let mut bad_count = BTreeMap::new();
    for k in p.scale_exps() {
        let mut good = 0u64;
        let mut bad = 0u64;
        for c in g.cubes_at(k) {
            if is_good(&c, &g)? {
                good += 1;
            } else {
                bad += 1;
            }
        }
        good_count.insert(format!("2^{k}"), good);
        bad_count.insert(format!("2^{k}"), bad);
    }
    // goodness probabilities
    let table = pi_good_table(&p, 1, seed)?;
    let mut pis = serde_json::Map::new();
    let mut reference_pi = None;
    for (k, pi) in &table {
        let entry = match pi {
            PiGood::Exact(r) => json!({"mode": "exact", "value": format!("{}/{}", r.numer(), r.denom())}),
            PiGood::Sampled { good, samples, seed } => json!({
                "mode": "sampled", "good": good, "samples": samples, "seed": seed
            }),
        };
        if *k == 0 {
            reference_pi = Some(pi.value());
        }
        pis.insert(format!("2^{k}"), entry);
    }
    if let Some(v) = reference_pi {
        if v <= 0.0 {
            pass = false;
        }
    }
    // reference-cube invariance at the reference scale
    let inv_a = biparam::lattice::pi_good_for_cube(&p, 1, &DyadicCube::new(1, 0, [0; 3]), seed)?;
    let inv_b = biparam::lattice::pi_good_for_cube(
        &p,
        1,
        &DyadicCube::new(1, 0, [(p.cubes_per_dim(0) as u32).saturating_sub(1), 0, 0]),
        seed,
    )?;
    let invariant = inv_a == inv_b;
    if !invariant {
        pass = false;
    }
    // truncation cardinalities with the bound asserted inside count_dn
    let mut dn = BTreeMap::new();
    let n_max = cfg.get_i64("grid.n_max", 3)? as u32;
    for n in 0..=n_max {
        match count_dn(&g, n) {
            Ok(c) => {
                dn.insert(format!("{n}"), c);
            }
            Err(e) => {
                dn.insert(format!("{n}"), 0);
                pass = false;
                eprintln!("cardinality bound violated: {e}");
            }
        }
    }
    let report = json!({
        "config": config_json(cfg),
        "params": {
            "n1": p.n1, "m": p.m_exp, "l": p.l_exp, "r": p.r,
            "gamma1": json_f64(p.gamma1), "periodic": p.periodic,
        },
        "omega": omega_hex(&omega),
        "tilingError": json_f64(tiling_err),
        "goodCount": good_count,
        "badCount": bad_count,
        "piGood": pis,
        "referenceInvariance": invariant,
        "dnCount": dn,
        "pass": pass,
    });
    out.write("grid_census.json", &serde_json::to_string_pretty(&report)?)?;
    out.sidecar("grid-census", seed)?;
    Ok(if pass { 0 } else { 2 })
}

/// Muckenhoupt constants: single weights over an exponent list plus the
/// multilinear vector, with argmax rectangles.
pub fn ap(cfg: &Config, out: &OutDir, seed: Option<u64>) -> CmdResult {
    let p = cfg.lattice()?;
    let seed = seeded(cfg, seed)?;
    let w = weight_from_spec(cfg, "weight", &p, seed)?;
    let fam = RectFamily::standard(&p)?;
    let mut csv = Csv::new(&["p", "constant", "argmax_rect"]);
    let ps = cfg.get("weight.ps").unwrap_or("1,2,4");
    let mut pass = true;
    for token in ps.split(',') {
        let e = exponent_from_str(token.trim())?;
        let (c, arg) = ap_constant(&p, &w, e)?;
        if c < 1.0 - 1e-12 {
            pass = false;
        }
        let (r1, r2) = &fam.rects[arg];
        csv.row(&[
            token.trim().to_string(),
            fmt_f64(c),
            format!("{r1}|{r2}"),
        ]);
    }
    // multilinear vector with the stated conventions
    let v = WeightVector::new(
        vec![w.clone(), w.clone()],
        vec![
            exponent_from_str(cfg.get("weight.mp1").unwrap_or("2"))?,
            exponent_from_str(cfg.get("weight.mp2").unwrap_or("2"))?,
        ],
    )?;
    let (mc, marg) = multilinear_ap_constant(&p, &v)?;
    let (r1, r2) = &fam.rects[marg];
    csv.row(&[
        format!(
            "({},{})",
            cfg.get("weight.mp1").unwrap_or("2"),
            cfg.get("weight.mp2").unwrap_or("2")
        ),
        fmt_f64(mc),
        format!("{r1}|{r2}"),
    ]);
    // strong maximal consistency: finite constant comes with finite
    // sampled operator ratios
    let mut rng = SeededRng::new(seed);
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..cfg.get_i64("weight.samples", 50)? {
        let f1 = random_fn(&p, AxisSet::Both, &mut rng);
        let f2 = random_fn(&p, AxisSet::Both, &mut rng);
        let m = strong_maximal(&p, &[&f1, &f2])?;
        let denom = f1.lp_norm(4.0) * f2.lp_norm(4.0);
        if denom > 1e-12 {
            worst_ratio = worst_ratio.max(m.lp_norm(2.0) / denom);
        }
    }
    if !worst_ratio.is_finite() {
        pass = false;
    }
    out.write("ap_constants.csv", &csv.finish())?;
    let report = json!({
        "config": config_json(cfg),
        "multilinearConstant": json_f64(mc),
        "strongMaximalWorstRatio": json_f64(worst_ratio),
        "pass": pass,
    });
    out.write("ap_report.json", &serde_json::to_string_pretty(&report)?)?;
    out.sidecar("ap", seed)?;
    Ok(if pass { 0 } else { 2 })
}

fn test_function(cfg: &Config, p: &LatticeParams, rng: &mut SeededRng) -> Result<StepFunction, Box<dyn Error>> {
    match cfg.get("function.kind").unwrap_or("staircase") {
        "staircase" => {
            let mut b = StepFunction::zero(p, AxisSet::Both);
            let c1 = p.cells(1);
            let c2 = p.cells(2);
            for i1 in 0..c1 {
                for i2 in 0..c2 {
                    b.values[i1 * c2 + i2] =
                        (1 + i1.min(c1 / 2)) as f64 * 0.5 + if i2 < c2 / 2 { 0.25 } else { 0.0 };
                }
            }
            Ok(b)
        }
        "random" => Ok(random_fn(p, AxisSet::Both, rng)),
        "haar" => {
            let g1 = standard_grid(p, 1)?;
            let g2 = standard_grid(p, 2)?;
            let h1 = haar(&g1, &HaarIndex { cube: DyadicCube::new(1, 0, [1, 0, 0]), eta: 1 })?;
            let h2 = haar(&g2, &HaarIndex { cube: DyadicCube::new(2, 0, [0, 0, 0]), eta: 1 })?;
            Ok(StepFunction::tensor(&h1, &h2)?)
        }
        other => Err(format!("unknown function kind '{other}'").into()),
    }
}

/// Oscillation suite: the three BMO flavors, constant invariance, and the
/// truncation defect curve.
pub fn bmo(cfg: &Config, out: &OutDir, seed: Option<u64>) -> CmdResult {
    let p = cfg.lattice()?;
    let seed = seeded(cfg, seed)?;
    let mut rng = SeededRng::new(seed);
    let grids = ProductGrid::new(standard_grid(&p, 1)?, standard_grid(&p, 2)?)?;
    let fam = UFamily::standard(&grids, seed);
    let b = test_function(cfg, &p, &mut rng)?;
    let little = bmo_norm(&b, &grids, &fam, BmoFlavor::LittleBmo)?;
    let product = bmo_norm(&b, &grids, &fam, BmoFlavor::ProductBmo)?;
    let shifted = b.add(&StepFunction::constant(&p, AxisSet::Both, 5.0))?;
    let inv_err = (bmo_norm(&shifted, &grids, &fam, BmoFlavor::LittleBmo)? - little)
        .abs()
        .max((bmo_norm(&shifted, &grids, &fam, BmoFlavor::ProductBmo)? - product).abs());
    let mut csv = Csv::new(&["n", "defect"]);
    let mut defects = Vec::new();
    let n_max = cfg.get_i64("bmo.n_max", 3)? as u32;
    for n in 0..=n_max {
        let d = cmo_defect(&b, &grids, &fam, n, BmoFlavor::ProductBmo)?;
        csv.row(&[n.to_string(), fmt_f64(d)]);
        defects.push(d);
    }
    let monotone = defects.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    let terminal_zero = *defects.last().unwrap() <= 1e-12;
    let pass = inv_err <= 1e-12 && monotone && terminal_zero;
    out.write("cmo_defect.csv", &csv.finish())?;
    let report = json!({
        "config": config_json(cfg),
        "littleBmo": json_f64(little),
        "productBmo": json_f64(product),
        "constantInvarianceError": json_f64(inv_err),
        "defectMonotone": monotone,
        "terminalDefectZero": terminal_zero,
        "uFamilySampled": fam.sampled.is_some(),
        "pass": pass,
    });
    out.write("bmo_report.json", &serde_json::to_string_pretty(&report)?)?;
    out.sidecar("bmo", seed)?;
    Ok(if pass { 0 } else { 2 })
}

/// Carleson packing and embedding trials with recorded constants.
pub fn carleson(cfg: &Config, out: &OutDir, seed: Option<u64>) -> CmdResult {
    let p = cfg.lattice()?;
    let seed = seeded(cfg, seed)?;
    let grids = ProductGrid::new(standard_grid(&p, 1)?, standard_grid(&p, 2)?)?;
    let fam = UFamily::standard(&grids, seed);
    let rects: Vec<(DyadicCube, DyadicCube)> =
        fam.rects.iter().map(|(a, b, _)| (*a, *b)).collect();
    let mut rng = SeededRng::new(seed);
    let trials = cfg.get_i64("carleson.trials", 100)? as usize;
    let mut csv = Csv::new(&["trial", "c1", "lhs", "rhs", "c"]);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let mut lam = CarlesonFamily::default();
        let mut a = BTreeMap::new();
        for _ in 0..6 {
            let (r1, r2) = rects[rng.below(rects.len() as u64) as usize];
            lam.insert(r1, r2, rng.uniform())?;
            a.insert((r1, r2), rng.uniform());
        }
        let c1 = carleson_check(&lam, &grids, &fam)?;
        let (lhs, rhs, c) = carleson_embed(&lam, &a, &grids, &fam)?;
        worst = worst.max(c);
        csv.row(&[
            t.to_string(),
            fmt_f64(c1),
            fmt_f64(lhs),
            fmt_f64(rhs),
            fmt_f64(c),
        ]);
    }
    let pass = worst <= 1.0 + 1e-9;
    out.write("carleson_trials.csv", &csv.finish())?;
    let report = json!({
        "config": config_json(cfg),
        "trials": trials,
        "worstConstant": json_f64(worst),
        "pass": pass,
    });
    out.write("carleson_report.json", &serde_json::to_string_pretty(&report)?)?;
    out.sidecar("carleson", seed)?;
    Ok(if pass { 0 } else { 2 })
}

/// Kernel condition checks and cancellation-hypothesis envelopes.
pub fn kernel_check(cfg: &Config, out: &OutDir, seed: Option<u64>) -> CmdResult {
    let p = cfg.lattice()?;
    let seed = seeded(cfg, seed)?;
    let name = cfg.get("kernel.name").unwrap_or("compact_cz");
    let spec = builtin_kernel(&p, name)?;
    let op = KernelOp::new(spec.clone());
    let budget = cfg.get_i64("kernel.budget", 1000)? as u64;
    let rep = check_kernel_conditions(&op, budget, seed)?;
    let hyp = hypothesis_tests(&op, &spec, seed)?;
    let mut csv = Csv::new(&["side", "center_dist", "pairing", "envelope"]);
    for (side, cd, v, env) in &hyp.curves {
        csv.row(&[fmt_f64(*side), fmt_f64(*cd), fmt_f64(*v), fmt_f64(*env)]);
    }
    out.write("hypothesis_curves.csv", &csv.finish())?;
    let report = json!({
        "config": config_json(cfg),
        "kernel": name,
        "samples": rep.samples,
        "sizeWorst": json_f64(rep.size_worst),
        "hoelderWorst": json_f64(rep.hoelder_worst),
        "mixedWorst": json_f64(rep.mixed_worst),
        "partialWorst": json_f64(rep.partial_worst),
        "witness": rep.witness.map(|w| format!("{w:?}")),
        "hypothesisWorstRatio": json_f64(hyp.worst_ratio),
        "tailsVanish": hyp.tails_vanish,
        "pass": rep.passed(),
    });
    out.write("kernel_check.json", &serde_json::to_string_pretty(&report)?)?;
    out.sidecar("kernel-check", seed)?;
    Ok(if rep.passed() { 0 } else { 2 })
}

fn engine_config(cfg: &Config, seed: u64) -> Result<EngineConfig, Box<dyn Error>> {
    let shifted = cfg.get_i64("represent.shifted_scales", 3)? as usize;
    let mc_samples = cfg.get_i64("represent.mc_samples", 0)? as usize;
    Ok(EngineConfig {
        budget: cfg.get_i64("represent.budget", 1 << 14)? as u64,
        shifted_scales: if shifted == 0 { None } else { Some(shifted) },
        n_ladder: vec![0, 1, 2, 3],
        montecarlo: if mc_samples == 0 { None } else { Some((mc_samples, seed ^ 0x5bd1e995)) },
        seed,
    })
}

fn bundle_json(cfg: &Config, bundle: &biparam::representation::RepresentationBundle) -> serde_json::Value {
    let mut stats = serde_json::Map::new();
    for (class, st) in &bundle.stats {
        stats.insert(
            format!("{}{}-k{}k{}", class.case1, class.case2, class.k1, class.k2),
            json!({
                "count": st.count,
                "maxRatio": json_f64(st.max_ratio),
                "tail": st.tail.iter().map(|(n, v)| json!([n, json_f64(*v)])).collect::<Vec<_>>(),
            }),
        );
    }
    let pi = |v: &Vec<(i32, biparam::Rational)>| -> Vec<serde_json::Value> {
        v.iter()
            .map(|(k, r)| json!({"scale": format!("2^{k}"), "pi": format!("{}/{}", r.numer(), r.denom())}))
            .collect()
    };
    let mut census = serde_json::Map::new();
    for ((role, case), count) in &bundle.census {
        census.insert(format!("role{role}-{case}"), json!(count));
    }
    json!({
        "config": config_json(cfg),
        "c0": json_f64(bundle.c0),
        "piGood1": pi(&bundle.pi1),
        "piGood2": pi(&bundle.pi2),
        "gridsUsed": bundle.grids_used,
        "rawTriples": bundle.raw_triples,
        "templatePairs": bundle.template_pairs,
        "census": census,
        "pieces": stats,
    })
}

/// Assemble the representation bundle and write its certificates.
pub fn represent(cfg: &Config, out: &OutDir, seed: Option<u64>) -> CmdResult {
    let p = cfg.lattice()?;
    let seed = seeded(cfg, seed)?;
    let name = cfg.get("kernel.name").unwrap_or("compact_cz");
    let op = KernelOp::new(builtin_kernel(&p, name)?);
    let e = EngineOp::Kernel(&op);
    let ecfg = engine_config(cfg, seed)?;
    let bundle = assemble(&e, &p, &ecfg)?;
    let mut pass = true;
    for st in bundle.stats.values() {
        if st.max_ratio > 1.0 + 1e-9 {
            pass = false;
        }
    }
    out.write(
        "bundle.json",
        &serde_json::to_string_pretty(&bundle_json(cfg, &bundle))?,
    )?;
    out.sidecar("represent", seed)?;
    Ok(if pass { 0 } else { 2 })
}

/// Assemble and verify against brute force on random mean-adjusted tuples.
pub fn verify_cmd(cfg: &Config, out: &OutDir, seed: Option<u64>) -> CmdResult {
    let p = cfg.lattice()?;
    let seed = seeded(cfg, seed)?;
    let name = cfg.get("kernel.name").unwrap_or("compact_cz");
    let op = KernelOp::new(builtin_kernel(&p, name)?);
    let e = EngineOp::Kernel(&op);
    let ecfg = engine_config(cfg, seed)?;
    let tuples_n = cfg.get_i64("verify.tuples", 20)? as usize;
    let tol = cfg.get_f64("verify.tolerance", 1e-8)?;
    let mut rng = SeededRng::new(seed);
    let tuples: Vec<_> = (0..tuples_n)
        .map(|_| {
            (
                random_fn(&p, AxisSet::Both, &mut rng),
                random_fn(&p, AxisSet::Both, &mut rng),
                random_fn(&p, AxisSet::Both, &mut rng),
            )
        })
        .collect();
    let (records, max_rel) = verify(&e, &p, &ecfg, &tuples)?;
    let mut csv = Csv::new(&["tuple", "brute", "bundle", "relerr"]);
    for (i, r) in records.iter().enumerate() {
        csv.row(&[
            i.to_string(),
            fmt_f64(r.brute),
            fmt_f64(r.bundle),
            fmt_f64(r.rel_err),
        ]);
    }
    out.write("verify.csv", &csv.finish())?;
    let bundle = assemble(&e, &p, &ecfg)?;
    out.write(
        "bundle.json",
        &serde_json::to_string_pretty(&bundle_json(cfg, &bundle))?,
    )?;
    let pass = max_rel <= tol;
    let report = json!({
        "config": config_json(cfg),
        "tuples": tuples_n,
        "maxRelErr": json_f64(max_rel),
        "tolerance": json_f64(tol),
        "pass": pass,
    });
    out.write("verify_report.json", &serde_json::to_string_pretty(&report)?)?;
    out.sidecar("verify", seed)?;
    Ok(if pass { 0 } else { 2 })
}

/// Truncation tail curves of the assembled bundle per piece class.
pub fn decay(cfg: &Config, out: &OutDir, seed: Option<u64>) -> CmdResult {
    let p = cfg.lattice()?;
    let seed = seeded(cfg, seed)?;
    let name = cfg.get("kernel.name").unwrap_or("compact_cz");
    let op = KernelOp::new(builtin_kernel(&p, name)?);
    let e = EngineOp::Kernel(&op);
    let ecfg = engine_config(cfg, seed)?;
    let bundle = assemble(&e, &p, &ecfg)?;
    let mut csv = Csv::new(&["class", "n", "tail"]);
    for (class, curve) in decay_report(&bundle) {
        for (n, v) in curve {
            csv.row(&[class.clone(), n.to_string(), fmt_f64(v)]);
        }
    }
    out.write("decay.csv", &csv.finish())?;
    out.sidecar("decay", seed)?;
    Ok(0)
}

/// Riesz-Kolmogorov probe of an operator image family.
pub fn probe(cfg: &Config, out: &OutDir, seed: Option<u64>) -> CmdResult {
    let p = cfg.lattice()?;
    let seed = seeded(cfg, seed)?;
    let name = cfg.get("probe.operator").unwrap_or("compact_cz");
    let w = Weight::one(&p);
    let samples = cfg.get_i64("probe.samples", 12)? as usize;
    let tol = cfg.get_f64("probe.tolerance", 1e-3)?;
    let cell = p.cell_side();
    let a_ladder = [1.0, 2.0, 4.0, 8.0];
    let judge_sub_cell = cfg.get_bool("probe.judge_sub_cell", false)?;
    let r_ladder: Vec<f64> = if judge_sub_cell {
        vec![4.0 * cell, 2.0 * cell, 0.5 * cell, 0.0]
    } else {
        vec![4.0 * cell, 2.0 * cell, cell * 1.01]
    };
    let report = match name {
        "zero" => probe_operator(
            &p,
            |f1, _| Ok(f1.scale(0.0)),
            (2.0, 2.0),
            &w,
            samples,
            seed,
            &a_ladder,
            &r_ladder,
            tol,
        )?,
        kernel => {
            let op = KernelOp::new(builtin_kernel(&p, kernel)?);
            probe_operator(
                &p,
                |f1, f2| apply_kernel_op(&op, f1, f2),
                (4.0, 4.0),
                &w,
                samples,
                seed,
                &a_ladder,
                &r_ladder,
                tol,
            )?
        }
    };
    let mut tail_csv = Csv::new(&["a", "tail"]);
    for (a, v) in &report.tail_curve {
        tail_csv.row(&[fmt_f64(*a), fmt_f64(*v)]);
    }
    out.write("probe_tail.csv", &tail_csv.finish())?;
    let mut osc_csv = Csv::new(&["r", "oscillation"]);
    for (r, v) in &report.oscillation_curve {
        osc_csv.row(&[fmt_f64(*r), fmt_f64(*v)]);
    }
    out.write("probe_oscillation.csv", &osc_csv.finish())?;
    let verdict = match report.verdict {
        Verdict::ConsistentWithCompact => "consistent-with-compact",
        Verdict::FailsTail => "fails-tail",
        Verdict::FailsOscillation => "fails-oscillation",
    };
    let j = json!({
        "config": config_json(cfg),
        "operator": name,
        "uniformBound": json_f64(report.uniform_bound),
        "verdict": verdict,
        "settings": report.settings,
    });
    out.write("probe_report.json", &serde_json::to_string_pretty(&j)?)?;
    out.sidecar("probe", seed)?;
    Ok(0)
}

/// The tensor non-compactness demonstration on the bounded lattice.
pub fn demo_riesz(cfg: &Config, out: &OutDir, seed: Option<u64>) -> CmdResult {
    let mut p = cfg.lattice()?;
    p.periodic = false;
    let seed = seeded(cfg, seed)?;
    let op = KernelOp::new(builtin_kernel(&p, "riesz_tensor")?);
    let g2grid = standard_grid(&p, 2)?;
    let g1ax = standard_grid(&p, 1)?;
    let per = p.cubes_per_dim(-1) as u32;
    let g1 = StepFunction::indicator(&g2grid, &DyadicCube::new(2, -1, [per / 4, 0, 0]));
    let g2 = StepFunction::indicator(&g2grid, &DyadicCube::new(2, -1, [3 * per / 4, 0, 0]));
    let mut fks = Vec::new();
    for i in 0..3u32 {
        let pos = 1 + i * (per / 4);
        let h = haar(&g1ax, &HaarIndex { cube: DyadicCube::new(1, -1, [pos, 0, 0]), eta: 1 })?;
        let ind = StepFunction::indicator(&g1ax, &DyadicCube::new(1, -1, [(pos + 2) % per, 0, 0]));
        fks.push((h, ind));
    }
    let demo = tensor_noncompact_demo(&op, 2.0, &g1, &g2, &fks)?;
    let pass = demo.applicable && demo.identity_error <= 1e-12 * (1.0 + demo.a0) && demo.min_pairwise > 0.0;
    let j = json!({
        "config": config_json(cfg),
        "a0": json_f64(demo.a0),
        "identityError": json_f64(demo.identity_error),
        "minPairwiseDistance": json_f64(demo.min_pairwise),
        "factorDistances": demo.factor_distances.iter().map(|v| json_f64(*v)).collect::<Vec<_>>(),
        "imageDistances": demo.image_distances.iter().map(|v| json_f64(*v)).collect::<Vec<_>>(),
        "applicable": demo.applicable,
        "pass": pass,
    });
    out.write("demo_riesz.json", &serde_json::to_string_pretty(&j)?)?;
    out.sidecar("demo-riesz", seed)?;
    Ok(if pass { 0 } else { 2 })
}

/// Weight interpolation ladder.
pub fn interpolate_weights_cmd(cfg: &Config, out: &OutDir, seed: Option<u64>) -> CmdResult {
    let p = cfg.lattice()?;
    let seed = seeded(cfg, seed)?;
    let u1 = weight_from_spec(cfg, "interpolate.u", &p, seed)?;
    let v1 = weight_from_spec(cfg, "interpolate.v", &p, seed ^ 0xabcdef)?;
    let pu = exponent_from_str(cfg.get("interpolate.p").unwrap_or("2"))?;
    let sv = exponent_from_str(cfg.get("interpolate.s").unwrap_or("4"))?;
    let u = WeightVector::new(vec![u1.clone(), u1], vec![pu, pu])?;
    let v = WeightVector::new(vec![v1.clone(), v1], vec![sv, sv])?;
    let ladder_points = cfg.get_i64("interpolate.ladder", 64)? as u32;
    let result = interpolate_weights(&p, &u, &v, ladder_points)?;
    let mut csv = Csv::new(&["theta_num", "theta_den", "feasible", "constant"]);
    for (theta, feasible, c) in &result.ladder {
        csv.row(&[
            theta.numer().to_string(),
            theta.denom().to_string(),
            feasible.to_string(),
            if c.is_nan() { String::from("nan") } else { fmt_f64(*c) },
        ]);
    }
    out.write("interpolation_ladder.csv", &csv.finish())?;
    let j = json!({
        "config": config_json(cfg),
        "theta": format!("{}/{}", result.theta.numer(), result.theta.denom()),
        "certificate": json_f64(result.certificate),
        "rExponents": result.r_exponents.iter().map(|e| match e {
            Exponent::Infinity => "inf".to_string(),
            Exponent::Finite(r) => format!("{}/{}", r.numer(), r.denom()),
        }).collect::<Vec<_>>(),
    });
    out.write("interpolation.json", &serde_json::to_string_pretty(&j)?)?;
    out.sidecar("interpolate-weights", seed)?;
    Ok(0)
}

/// Round-trip check used by tests: build a validated shift, decompose it,
/// and verify the bundle reproduces its form.
pub fn round_trip_shift(p: &LatticeParams, ecfg: &EngineConfig, tuples: usize, seed: u64) -> Result<f64, Box<dyn Error>> {
    let grids = ProductGrid::new(standard_grid(p, 1)?, standard_grid(p, 2)?)?;
    let mut op = ShiftOp::new(
        grids.clone(),
        vec![(1, 0), (1, 1), (0, 1)],
        vec![(1, 1), (0, 1), (1, 0)],
    )?;
    let q1 = DyadicCube::new(1, 1, [0, 0, 0]);
    let q2 = DyadicCube::new(2, 1, [1, 0, 0]);
    let c1a = grids.grid1.child(&q1, 0)?;
    let c1b = grids.grid1.child(&q1, 1)?;
    let c2a = grids.grid2.child(&q2, 0)?;
    let key = ShiftKey {
        q: (q1, q2),
        cubes: vec![(c1a, q2), (c1b, c2a), (q1, c2a)],
    };
    let cap = op.normalization(&key);
    op.insert(key, 0.8 * cap)?;
    let ops = [op];
    let e = EngineOp::Shifts(&ops);
    let mut rng = SeededRng::new(seed);
    let tuples: Vec<_> = (0..tuples)
        .map(|_| {
            (
                random_fn(p, AxisSet::Both, &mut rng),
                random_fn(p, AxisSet::Both, &mut rng),
                random_fn(p, AxisSet::Both, &mut rng),
            )
        })
        .collect();
    let (_, max_rel) = verify(&e, p, ecfg, &tuples)?;
    Ok(max_rel)
}

/// Finite-rank family helper shared by the acceptance suite.
pub fn finite_rank_family(
    p: &LatticeParams,
    count: usize,
    seed: u64,
) -> Result<Vec<StepFunction>, Box<dyn Error>> {
    let grids = ProductGrid::new(standard_grid(p, 1)?, standard_grid(p, 2)?)?;
    let w = Weight::one(p);
    let samples = sample_unit_ball(p, 2.0, &w, count, seed)?;
    let mut family = Vec::new();
    for f in samples {
        let (pn, _) = project_n(&f, &grids, 1)?;
        family.push(pn);
    }
    Ok(family)
}

/// Shared helper for acceptance: the sub-cell and resolution ladders.
pub fn rk_ladders(p: &LatticeParams) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cell = p.cell_side();
    (
        vec![1.0, 2.0, 4.0, 8.0],
        vec![4.0 * cell, 2.0 * cell, 0.5 * cell, 0.0],
        vec![4.0 * cell, 2.0 * cell, cell * 1.01],
    )
}

pub use biparam::compactprobe::CompactnessReport;
pub use biparam::weights::weighted_norm_measure as weighted_norm;

/// Exposed for the acceptance suite.
pub fn rk(
    family: &[StepFunction],
    p_exp: f64,
    w: &Weight,
    a_ladder: &[f64],
    r_ladder: &[f64],
    variant: RkVariant,
    tol: f64,
) -> Result<CompactnessReport, Box<dyn Error>> {
    Ok(rk_functionals(family, p_exp, w, a_ladder, r_ladder, variant, tol)?)
}
