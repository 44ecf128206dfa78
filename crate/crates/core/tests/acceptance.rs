//! Acceptance gate: one test per release criterion, each printing a
//! single `criterion NN <name>: PASS/FAIL` line (run with `--nocapture`
//! to see them). Tolerances are pinned here and nowhere else; a failing
//! criterion must fail loudly rather than be loosened silently.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use obstacle_core::analysis::{
    apriori_bounds_continuous, apriori_bounds_discrete, discrete_dependence_bound, fit_rate,
    reference_solution,
};
use obstacle_core::control::control_consistency_error;
use obstacle_core::fdm::{assemble_weights, consistency_error, SmoothTestFunction};
use obstacle_core::grid::{self, GridFunction};
use obstacle_core::presets::{self, Preset};
use obstacle_core::problem::{CoefficientSet, ProblemSpec, SchemeFamily};
use obstacle_core::solver::{
    self, build_operator, check_discrete_comparison, epsilon_continuation, measure_contraction,
    AnyOperator, SchemeChoice, SchemeOp, SolverConfig,
};

const TAU: f64 = std::f64::consts::TAU;

fn report(id: u32, name: &str, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    println!("criterion {id:02} {name}: {verdict} ({detail})");
    assert!(ok, "criterion {id:02} {name}: {detail}");
}

fn dyadic(range: std::ops::RangeInclusive<i32>) -> Vec<f64> {
    range.map(|k| 2f64.powi(-k)).collect()
}

fn fdm_op(spec: &ProblemSpec, grid: Arc<grid::Grid>) -> AnyOperator {
    build_operator(spec, grid, SchemeChoice::Fdm).unwrap()
}

/// Per-preset check grid: fine enough to exercise the stencils, small
/// enough that a thousand randomized trials stay cheap.
fn trial_grid(p: &Preset, spec: &ProblemSpec) -> Arc<grid::Grid> {
    if spec.dim == 1 {
        p.grid(1.0 / 64.0)
    } else {
        p.grid(1.0 / 16.0)
    }
}

fn signed_gap(u: &GridFunction, v: &GridFunction) -> (f64, f64) {
    let mut hi = f64::NEG_INFINITY;
    let mut lo = f64::INFINITY;
    for (a, b) in u.values().iter().zip(v.values()) {
        hi = hi.max(a - b);
        lo = lo.min(a - b);
    }
    (hi, lo)
}

#[test]
fn criterion_01_weights_form_probabilities() {
    let mut worst_p: f64 = 0.0;
    let mut worst_sum: f64 = 0.0;
    for p in presets::registry() {
        let spec = p.spec();
        let g = p.default_grid();
        for node in g.iter_nodes() {
            for ctrl in 0..spec.coefficients.controls() {
                let w = assemble_weights(&spec, &g, node, ctrl).unwrap();
                for &weight in &w.p {
                    worst_p = worst_p.max((-weight).max(weight - 1.0));
                }
                worst_sum = worst_sum.max((w.row_sum() - 1.0).abs());
            }
        }
    }
    let ok = worst_p <= 1e-12 && worst_sum <= 1e-12;
    report(
        1,
        "weights-form-probabilities",
        ok,
        &format!("worst range excess {worst_p:.2e}, worst row-sum defect {worst_sum:.2e}"),
    );
}

#[test]
fn criterion_02_fixed_point_contraction() {
    let mut detail = String::new();
    let mut ok = true;
    for p in presets::registry() {
        let spec = p.spec();
        let h = if spec.dim == 1 { 1.0 / 64.0 } else { 1.0 / 32.0 };
        let g = p.grid(h);
        let op = fdm_op(&spec, g);
        let lambda0 = spec.derive_lambda0(SchemeFamily::Fdm);
        let bound = 1.0 / (1.0 + lambda0 * h * h) + 0.01;
        let measured = measure_contraction(&op, 100, 1.0, 0xc0_ffee);
        ok &= measured <= bound;
        detail.push_str(&format!("{}: {measured:.6} <= {bound:.6}; ", p.name));
    }
    report(2, "fixed-point-contraction", ok, detail.trim_end_matches("; "));
}

#[test]
fn criterion_03_closed_form_oracle() {
    let p = presets::find("zero-diffusion-1d").unwrap();
    let spec = p.spec();
    let g = p.grid(1.0 / 128.0);
    let op = fdm_op(&spec, g.clone());
    let (u, rep) = solver::solve_obstacle(&op, &SolverConfig::default(), None).unwrap();
    let mut worst: f64 = 0.0;
    for node in g.iter_nodes() {
        let exact = p.closed_form(&g.point_of_flat(node)).unwrap();
        worst = worst.max((u.value(node) - exact).abs());
    }
    let ok = rep.converged && worst <= 1e-8;
    report(3, "closed-form-oracle", ok, &format!("sup error {worst:.2e}"));
}

/// Penalization rate harness shared by criteria 4 and 5: sup gap
/// `u_h - v_{h,eps}` against eps on a 1024-node grid, plus the sandwich
/// `v <= u` up to solver noise.
fn penalization_rate(preset: &str) -> (f64, f64) {
    let p = presets::find(preset).unwrap();
    let spec = p.spec();
    let g = p.grid(1.0 / 1024.0);
    let op = fdm_op(&spec, g);
    let cfg = SolverConfig::default();
    let (u, _) = solver::solve_obstacle(&op, &cfg, None).unwrap();
    let schedule = dyadic(3..=10);
    let runs = epsilon_continuation(&op, &schedule, &cfg).unwrap();
    let mut samples = Vec::new();
    let mut gap_min = f64::INFINITY;
    for (eps, v, rep) in &runs {
        assert!(rep.converged);
        let (hi, lo) = signed_gap(&u, v);
        samples.push((*eps, hi));
        gap_min = gap_min.min(lo);
    }
    let fit = fit_rate(&samples).unwrap();
    (fit.slope, gap_min)
}

#[test]
fn criterion_04_penalization_rate_smooth() {
    let (slope, gap_min) = penalization_rate("smooth-obstacle-1d");
    let ok = slope >= 0.90 && gap_min >= -1e-10;
    report(
        4,
        "penalization-rate-smooth",
        ok,
        &format!("slope {slope:.3} (need >= 0.90), min gap {gap_min:.2e}"),
    );
}

#[test]
fn criterion_05_penalization_rate_hoelder() {
    let (slope, gap_min) = penalization_rate("hoelder-obstacle-1d");
    let ok = slope >= 0.20 && gap_min >= -1e-10;
    report(
        5,
        "penalization-rate-hoelder",
        ok,
        &format!("slope {slope:.3} (need >= 0.20), min gap {gap_min:.2e}"),
    );
}

fn h_rate(preset: &str, choice_of: impl Fn(f64) -> (Arc<grid::Grid>, SchemeChoice), hs: &[f64], k: usize) -> f64 {
    let p = presets::find(preset).unwrap();
    let spec = p.spec();
    // Errors at the finest levels sit far above this tolerance, so the
    // cheaper solves cannot distort the fitted slope.
    let cfg = SolverConfig {
        tolerance: 1e-8,
        ..SolverConfig::default()
    };
    let mut samples = Vec::new();
    for &h in hs {
        let (g, choice) = choice_of(h);
        let op = build_operator(&spec, g.clone(), choice).unwrap();
        let (u, rep) = solver::solve_obstacle(&op, &cfg, None).unwrap();
        assert!(rep.converged, "{preset} h={h}");
        let (reference, rref) = reference_solution(&spec, &g, choice, k, &cfg).unwrap();
        assert!(rref.converged, "{preset} reference h={h}");
        samples.push((h, grid::sup_diff(&u, &reference).unwrap()));
    }
    fit_rate(&samples).unwrap().slope
}

#[test]
fn criterion_06_fdm_h_rate() {
    let hs = dyadic(4..=9);
    let mut detail = String::new();
    let mut ok = true;
    for (preset, need) in [("degenerate-obstacle-1d", 0.16), ("smooth-obstacle-1d", 0.24)] {
        let p = presets::find(preset).unwrap();
        let slope = h_rate(preset, |h| (p.grid(h), SchemeChoice::Fdm), &hs, 8);
        ok &= slope >= need;
        detail.push_str(&format!("{preset}: slope {slope:.3} (need >= {need}); "));
    }
    report(6, "fdm-h-rate", ok, detail.trim_end_matches("; "));
}

#[test]
fn criterion_07_control_h_rate() {
    let hs = dyadic(2..=5);
    let mut detail = String::new();
    let mut ok = true;
    for (preset, need) in [
        ("hoelder-obstacle-1d", 1.0 / 12.0),
        ("smooth-obstacle-1d", 1.0 / 8.0),
    ] {
        let p = presets::find(preset).unwrap();
        let slope = h_rate(
            preset,
            |h| (p.grid(h * h), SchemeChoice::Control { h_scheme: h }),
            &hs,
            4,
        );
        ok &= slope >= need;
        detail.push_str(&format!("{preset}: slope {slope:.3} (need >= {need:.3}); "));
    }
    report(7, "control-h-rate", ok, detail.trim_end_matches("; "));
}

#[test]
fn criterion_08_consistency_rates() {
    let p = presets::find("diffusion-drift-1d").unwrap();
    let spec = p.spec();
    let phi = |x: &[f64]| (TAU * x[0]).sin();
    let grad = |x: &[f64]| vec![TAU * (TAU * x[0]).cos()];
    let hess = |x: &[f64]| vec![-TAU * TAU * (TAU * x[0]).sin()];
    let test = SmoothTestFunction {
        phi: &phi,
        grad: &grad,
        hess: &hess,
        d2: TAU * TAU,
        d3: TAU * TAU * TAU,
        d4: TAU * TAU * TAU * TAU,
    };

    let mut ok = true;
    let mut detail = String::new();

    let mut samples = Vec::new();
    for h in dyadic(5..=9) {
        let g = p.grid(h);
        let (measured, bound) = consistency_error(&spec, &g, &test);
        ok &= measured <= bound;
        samples.push((h, measured));
    }
    let slope = fit_rate(&samples).unwrap().slope;
    ok &= slope >= 0.9;
    detail.push_str(&format!("fdm slope {slope:.3}"));

    let mut samples = Vec::new();
    for h in dyadic(3..=6) {
        let g = p.grid(h * h);
        let (measured, bound) = control_consistency_error(&spec, &g, h, &test, TAU).unwrap();
        ok &= measured <= bound;
        samples.push((h, measured));
    }
    let slope = fit_rate(&samples).unwrap().slope;
    ok &= slope >= 0.9;
    detail.push_str(&format!(", control slope {slope:.3} (need >= 0.9)"));

    report(8, "consistency-rates", ok, &detail);
}

/// Randomized monotonicity / comparison suite for one operator. Returns
/// (shift violations, stencil violations, comparison violations).
fn monotonicity_suite<S: SchemeOp>(
    op: &S,
    base: &GridFunction,
    trials: usize,
    tol: f64,
    seed: u64,
) -> (usize, usize, usize) {
    let lambda_lo = op.spec().coefficients.lambda_lo;
    let n = op.grid().node_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shift_bad = 0;
    let mut stencil_bad = 0;
    let mut compare_bad = 0;
    for _ in 0..trials {
        let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let node = rng.gen_range(0..n);
        let m: f64 = rng.gen_range(0.0..1.0);
        let r = u[node];
        let s0 = op.residual(&u, node, r);
        // Uniform shift raises the residual by at least lambda_lo * m.
        let shifted: Vec<f64> = u.iter().map(|v| v + m).collect();
        if op.residual(&shifted, node, r + m) < s0 + lambda_lo * m - tol {
            shift_bad += 1;
        }
        // Raising off-center values can only lower the residual.
        let raised: Vec<f64> = u.iter().map(|v| v + rng.gen_range(0.0..1.0)).collect();
        if op.residual(&raised, node, r) > s0 + tol {
            stencil_bad += 1;
        }
        // Constant shifts of a solved field are strict sub/supersolutions;
        // comparison must order them.
        let d_sub: f64 = rng.gen_range(1e-4..0.5);
        let d_super: f64 = rng.gen_range(1e-4..0.5);
        let sub = base.map(|v| v - d_sub);
        let sup = base.map(|v| v + d_super);
        if !check_discrete_comparison(op, &sub, &sup, tol).is_clean() {
            compare_bad += 1;
        }
    }
    (shift_bad, stencil_bad, compare_bad)
}

fn epsilon_monotone<S: SchemeOp>(
    op: &S,
    schedule: &[f64],
    cfg: &SolverConfig,
    tol: f64,
) -> f64 {
    let runs = epsilon_continuation(op, schedule, cfg).unwrap();
    let mut worst: f64 = 0.0;
    for pair in runs.windows(2) {
        // Smaller eps lifts the penalized solution: v_{eps'} >= v_eps.
        let (_, drop) = signed_gap(&pair[1].1, &pair[0].1);
        worst = worst.max((-drop).max(0.0));
    }
    assert!(worst <= tol, "eps-monotonicity violated by {worst:.2e}");
    worst
}

#[test]
fn criterion_09_monotonicity_comparison() {
    let tol = 1e-10;
    let mut ok = true;
    let mut detail = String::new();
    for (i, p) in presets::registry().iter().enumerate() {
        let spec = p.spec();
        let g = trial_grid(p, &spec);
        let op = fdm_op(&spec, g);
        let cfg = SolverConfig {
            tolerance: 1e-12,
            ..SolverConfig::default()
        };
        let (base, _) = solver::fixed_point_solve(&op, &cfg, None).unwrap();
        let (a, b, c) = monotonicity_suite(&op, &base, 1000, tol, 0x51ab + i as u64);
        let eps_drop = if spec.obstacle.is_some() {
            epsilon_monotone(&op, &dyadic(2..=5), &cfg, tol)
        } else {
            0.0
        };
        let clean = a == 0 && b == 0 && c == 0;
        ok &= clean;
        if !clean {
            detail.push_str(&format!("{}: {a}/{b}/{c} violations; ", p.name));
        }
        let _ = eps_drop;
    }
    if detail.is_empty() {
        detail = "no violations in 1000 trials per preset".to_string();
    }
    report(9, "monotonicity-comparison", ok, detail.trim_end_matches("; "));
}

fn with_coefficients(
    base: &ProblemSpec,
    edit: impl Fn(usize, &CoefficientSet) -> (String, String, String),
) -> ProblemSpec {
    use obstacle_core::expr::parse_expression;
    let co = &base.coefficients;
    let n = co.controls();
    let mut b = Vec::new();
    let mut c = Vec::new();
    let mut f = Vec::new();
    for ctrl in 0..n {
        let (be, ce, fe) = edit(ctrl, co);
        b.push(vec![parse_expression(&be).unwrap()]);
        c.push(parse_expression(&ce).unwrap());
        f.push(parse_expression(&fe).unwrap());
    }
    ProblemSpec::new(
        base.dim,
        base.bounds.clone(),
        base.controls.clone(),
        CoefficientSet::new(
            base.dim,
            co.p_cols(),
            n,
            (0..n).map(|ctrl| co.sigma_exprs(ctrl).to_vec()).collect(),
            b,
            c,
            f,
            co.lambda_lo,
            co.lambda_hi,
            co.lipschitz.clone(),
        )
        .unwrap(),
        None,
        base.sense,
    )
    .unwrap()
}

#[test]
fn criterion_10_apriori_and_dependence_bounds() {
    let mut ok = true;
    let mut detail = String::new();

    // A priori sup / Lipschitz bounds dominate the solved norms.
    for p in presets::registry() {
        let spec = p.spec();
        let h = if spec.dim == 1 { 1.0 / 64.0 } else { 1.0 / 32.0 };
        let g = p.grid(h);
        let op = fdm_op(&spec, g);
        let cfg = SolverConfig {
            relaxation: if spec.dim == 2 { 1.5 } else { 1.0 },
            ..SolverConfig::default()
        };
        let (_, rep) = solver::fixed_point_solve(&op, &cfg, None).unwrap();
        let cont = apriori_bounds_continuous(&spec);
        let disc = apriori_bounds_discrete(&spec, h);
        let fits = rep.sup_norm <= cont.sup_bound + 1e-8
            && rep.sup_norm <= disc.sup_bound + 1e-8
            && rep.lipschitz_estimate <= disc.lipschitz_bound + 1e-8;
        ok &= fits;
        if !fits {
            detail.push_str(&format!(
                "{}: |u|={:.3} vs {:.3}, [u]={:.3} vs {:.3}; ",
                p.name, rep.sup_norm, disc.sup_bound, rep.lipschitz_estimate, disc.lipschitz_bound
            ));
        }
    }

    // Coefficient-dependence bound dominates the measured solution gap
    // for randomized drift / rate / source perturbations.
    let mut base = presets::find("diffusion-drift-1d").unwrap().spec();
    base.obstacle = None;
    let g = presets::find("diffusion-drift-1d").unwrap().grid(1.0 / 64.0);
    let cfg = SolverConfig::default();
    let op1 = fdm_op(&base, g.clone());
    let (u1, r1) = solver::fixed_point_solve(&op1, &cfg, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0xb0a7);
    let mut worst_margin = f64::NEG_INFINITY;
    for trial in 0..20 {
        let db: f64 = if trial % 3 == 0 { rng.gen_range(-0.05..0.05) } else { 0.0 };
        let dc: f64 = if trial % 3 == 1 { rng.gen_range(0.0..0.05) } else { 0.0 };
        let df: f64 = if trial % 3 == 2 { rng.gen_range(-0.1..0.1) } else { 0.0 };
        let other = with_coefficients(&base, |ctrl, co| {
            (
                format!("({}) + {}", co.b_exprs(ctrl)[0], db),
                format!("({}) + {}", co.c_expr(ctrl), dc),
                format!("({}) + {}", co.f_expr(ctrl), df),
            )
        });
        let op2 = fdm_op(&other, g.clone());
        let (u2, r2) = solver::fixed_point_solve(&op2, &cfg, None).unwrap();
        let l = 1.0f64.max(r1.lipschitz_estimate).max(r2.lipschitz_estimate);
        let m = r1.sup_norm.max(r2.sup_norm);
        let bound = discrete_dependence_bound(&base, &other, l, m).unwrap();
        let measured = grid::sup_diff(&u1, &u2).unwrap();
        worst_margin = worst_margin.max(measured - bound);
        ok &= measured <= bound + 1e-8;
    }
    detail.push_str(&format!("worst dependence margin {worst_margin:.2e}; "));

    // Penalized solutions keep a uniformly bounded Lipschitz estimate
    // along the eps schedule (within 5% of each other).
    let p = presets::find("smooth-obstacle-1d").unwrap();
    let op = fdm_op(&p.spec(), p.grid(1.0 / 256.0));
    let runs = epsilon_continuation(&op, &dyadic(6..=10), &cfg).unwrap();
    let lips: Vec<f64> = runs.iter().map(|(_, _, rep)| rep.lipschitz_estimate).collect();
    let spread = lips.iter().cloned().fold(f64::MIN, f64::max)
        / lips.iter().cloned().fold(f64::MAX, f64::min);
    ok &= spread <= 1.05;
    detail.push_str(&format!("eps-uniform Lipschitz spread {spread:.4}"));

    report(10, "apriori-and-dependence-bounds", ok, &detail);
}

#[test]
fn criterion_11_cross_derivative_2d() {
    let p = presets::find("cross-derivative-2d").unwrap();
    let spec = p.spec();
    let h = 1.0 / 128.0;
    let g = p.grid(h);
    let mut ok = true;
    let mut detail = String::new();

    // Weights stay probabilities despite the mixed second-order term.
    let mut worst: f64 = 0.0;
    for node in g.iter_nodes() {
        for ctrl in 0..spec.coefficients.controls() {
            let w = assemble_weights(&spec, &g, node, ctrl).unwrap();
            for &weight in &w.p {
                worst = worst.max((-weight).max(weight - 1.0));
            }
            worst = worst.max((w.row_sum() - 1.0).abs());
        }
    }
    ok &= worst <= 1e-12;
    detail.push_str(&format!("weight defect {worst:.2e}; "));

    let op = fdm_op(&spec, g.clone());
    let lambda0 = spec.derive_lambda0(SchemeFamily::Fdm);
    let bound = 1.0 / (1.0 + lambda0 * h * h) + 0.01;
    let contraction = measure_contraction(&op, 100, 1.0, 0x2d2d);
    ok &= contraction <= bound;
    detail.push_str(&format!("contraction {contraction:.6} <= {bound:.6}; "));

    // Zero-diffusion companion on the same 128^2 grid pins the solver to
    // the closed form.
    let companion = presets::find("zero-diffusion-2d").unwrap();
    let cg = companion.grid(h);
    let cop = fdm_op(&companion.spec(), cg.clone());
    let (u, _) = solver::solve_obstacle(&cop, &SolverConfig::default(), None).unwrap();
    let mut err: f64 = 0.0;
    for node in cg.iter_nodes() {
        let exact = companion.closed_form(&cg.point_of_flat(node)).unwrap();
        err = err.max((u.value(node) - exact).abs());
    }
    ok &= err <= 1e-8;
    detail.push_str(&format!("companion closed-form error {err:.2e}; "));

    // The randomized monotonicity / comparison suite at full resolution.
    // The Gauss-Seidel rate at 128^2 makes residual 1e-10 solves cost
    // minutes each, so the two solved base fields stop at residual 1e-6
    // (1.7 is the largest empirically stable over-relaxation factor).
    // The residual trials themselves stay exact at tolerance 1e-10: the
    // comparison shifts (>= 1e-4) dominate the base residual by two
    // orders of magnitude, and the eps-monotonicity slack 2.5e-6 covers
    // the rigorous value-error bound residual / lambda_0 per solve.
    let cfg = SolverConfig {
        relaxation: 1.7,
        tolerance: 1e-6,
        ..SolverConfig::default()
    };
    let (base, rep) = solver::fixed_point_solve(&op, &cfg, None).unwrap();
    assert!(rep.converged);
    let (a, b, c) = monotonicity_suite(&op, &base, 1000, 1e-10, 0x2d9);
    ok &= a == 0 && b == 0 && c == 0;
    detail.push_str(&format!("suite violations {a}/{b}/{c}; "));
    let eps_drop = epsilon_monotone(&op, &dyadic(2..=4), &cfg, 2.5e-6);
    detail.push_str(&format!("eps-monotone drop {eps_drop:.2e}"));

    report(11, "cross-derivative-2d", ok, &detail);
}
