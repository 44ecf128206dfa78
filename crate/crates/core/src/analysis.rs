//! A priori bound calculators, coefficient-dependence bounds, refined
//! reference solutions, and log-log rate fitting.
//!
//! All bound formulas keep the per-control quotient structure: the sup of
//! quotients is taken over controls, never the quotient of sups, because
//! for some controls both the numerator and denominator may blow up while
//! their ratio stays bounded. Sup norms of coefficients are estimated on
//! a fixed deterministic sample cloud.

use std::sync::Arc;

use thiserror::Error;

use crate::grid::{Grid, GridFunction};
use crate::problem::ProblemSpec;
use crate::solver::{
    self, build_operator, BuildError, SchemeChoice, SolveReport, SolverConfig, SolverError,
};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("specs have different control counts: {0} vs {1}")]
    ControlMismatch(usize, usize),
    #[error("discrete dependence bound requires identical diffusion matrices")]
    DifferingDiffusion,
    #[error("rate fit needs at least 3 samples, got {0}")]
    TooFewSamples(usize),
    #[error("rate fit samples must be strictly positive, got ({0}, {1})")]
    NonpositiveSample(f64, f64),
    #[error("refinement factor must be at least 1")]
    BadRefinement,
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Formula values of the a priori estimates. `lipschitz_bound` is
/// infinite when the contraction denominator is nonpositive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AprioriBounds {
    pub sup_bound: f64,
    pub lipschitz_bound: f64,
    /// Proxy for the shaking constant K: the sum of the two bounds. The
    /// literal constant has no constructive recipe.
    pub k_proxy: f64,
}

impl AprioriBounds {
    fn new(sup_bound: f64, lipschitz_bound: f64) -> AprioriBounds {
        AprioriBounds {
            sup_bound,
            lipschitz_bound,
            k_proxy: sup_bound + lipschitz_bound,
        }
    }
}

const SAMPLE_COUNT: usize = 512;
const SAMPLE_SEED: u64 = 0xa9a1;

/// Sample cloud for sup/inf estimation: a dense per-axis lattice that
/// includes the endpoints (so dyadic extrema of trigonometric data are
/// hit exactly) plus seeded random draws.
fn bound_samples(spec: &ProblemSpec) -> Vec<Vec<f64>> {
    let per_axis = match spec.dim {
        1 => 1024usize,
        2 => 64,
        _ => 8,
    };
    let mut pts = Vec::new();
    let mut idx = vec![0usize; spec.dim];
    loop {
        let p: Vec<f64> = idx
            .iter()
            .zip(&spec.bounds)
            .map(|(&i, &(lo, hi))| lo + (hi - lo) * i as f64 / per_axis as f64)
            .collect();
        pts.push(p);
        let mut axis = spec.dim;
        let done = loop {
            if axis == 0 {
                break true;
            }
            axis -= 1;
            if idx[axis] < per_axis {
                idx[axis] += 1;
                break false;
            }
            idx[axis] = 0;
        };
        if done {
            break;
        }
    }
    pts.extend(spec.sample_points(SAMPLE_COUNT, SAMPLE_SEED));
    pts
}

/// Sampled `|f(., 0)|_0` for one control.
fn sup_f(spec: &ProblemSpec, ctrl: usize, samples: &[Vec<f64>]) -> f64 {
    samples
        .iter()
        .map(|x| spec.coefficients.eval_f(ctrl, x, 0.0).abs())
        .fold(0.0, f64::max)
}

fn quotient(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        f64::INFINITY
    }
}

/// Sup over per-control quotients `|f|_0 / inf c`: the zero-order a
/// priori sup bound shared by the continuous and discrete estimates.
fn sup_bound(spec: &ProblemSpec, samples: &[Vec<f64>]) -> f64 {
    (0..spec.coefficients.controls())
        .map(|ctrl| quotient(sup_f(spec, ctrl, samples), spec.inf_c(ctrl, samples)))
        .fold(0.0, f64::max)
}

/// Bounds of the continuous problem: `|u|_0 <= sup |f|_0 / inf c` and
/// `|Du|_0 <= sup ([c]_1 |u|_0 + [f]_1) / (inf c - [sigma]_1^2 - [b]_1)`.
pub fn apriori_bounds_continuous(spec: &ProblemSpec) -> AprioriBounds {
    let samples = bound_samples(spec);
    let m = sup_bound(spec, &samples);
    let lip = (0..spec.coefficients.controls())
        .map(|ctrl| {
            let l = spec.coefficients.lipschitz[ctrl];
            let den = spec.inf_c(ctrl, &samples) - l.sigma * l.sigma - l.b;
            quotient(l.c * m + l.f, den)
        })
        .fold(0.0, f64::max);
    AprioriBounds::new(m, lip)
}

/// Bounds of the FDM scheme at spacing `h`: same sup bound, Lipschitz
/// numerator `(|u_h|_0 + h^2 |f|_0)/(1 + h^2 inf c) [c]_1 + [f]_1` and
/// denominator `inf c - 2 sqrt(N) [b]_1`.
pub fn apriori_bounds_discrete(spec: &ProblemSpec, h: f64) -> AprioriBounds {
    let samples = bound_samples(spec);
    let m = sup_bound(spec, &samples);
    let sqrt_n = (spec.dim as f64).sqrt();
    let lip = (0..spec.coefficients.controls())
        .map(|ctrl| {
            let l = spec.coefficients.lipschitz[ctrl];
            let inf_c = spec.inf_c(ctrl, &samples);
            let num = (m + h * h * sup_f(spec, ctrl, &samples)) / (1.0 + h * h * inf_c) * l.c
                + l.f;
            quotient(num, inf_c - 2.0 * sqrt_n * l.b)
        })
        .fold(0.0, f64::max);
    AprioriBounds::new(m, lip)
}

fn check_controls(spec: &ProblemSpec, other: &ProblemSpec) -> Result<(), AnalysisError> {
    let (a, b) = (
        spec.coefficients.controls(),
        other.coefficients.controls(),
    );
    if a != b {
        return Err(AnalysisError::ControlMismatch(a, b));
    }
    Ok(())
}

/// Sampled sup norms of the per-control coefficient differences:
/// `(|sigma - sigma_bar|_0, |b - b_bar|_0, |c - c_bar|_0, |f - f_bar|_0)`.
fn coefficient_gaps(
    spec: &ProblemSpec,
    other: &ProblemSpec,
    ctrl: usize,
    samples: &[Vec<f64>],
) -> (f64, f64, f64, f64) {
    let mut ds: f64 = 0.0;
    let mut db: f64 = 0.0;
    let mut dc: f64 = 0.0;
    let mut df: f64 = 0.0;
    for x in samples {
        let s1 = spec.coefficients.eval_sigma(ctrl, x);
        let s2 = other.coefficients.eval_sigma(ctrl, x);
        ds = ds.max(
            s1.iter()
                .zip(&s2)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt(),
        );
        let b1 = spec.coefficients.eval_b(ctrl, x);
        let b2 = other.coefficients.eval_b(ctrl, x);
        db = db.max(
            b1.iter()
                .zip(&b2)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt(),
        );
        dc = dc.max((spec.coefficients.eval_c(ctrl, x) - other.coefficients.eval_c(ctrl, x)).abs());
        df = df.max(
            (spec.coefficients.eval_f(ctrl, x, 0.0) - other.coefficients.eval_f(ctrl, x, 0.0))
                .abs(),
        );
    }
    (ds, db, dc, df)
}

/// Continuous-dependence bound on `|u - u_bar|_0` given solution norms
/// `L` (Lipschitz) and `M` (sup):
///
/// ```text
/// sup (K / (inf c v inf c_bar)) |sigma - sigma_bar|_0
///   + sup (1 / (inf c v inf c_bar)) { 2L |b - b_bar|_0 + M |c - c_bar|_0 + |f - f_bar|_0 }
/// K^2 = 32 L sup { 4L [sigma]_1^2 ^ [sigma_bar]_1^2 + 2L [b]_1 ^ [b_bar]_1
///                  + M [c]_1 v [c_bar]_1 + [f]_1 ^ [f_bar]_1 }
/// ```
///
/// with `v` = max and `^` = min taken per control.
pub fn continuous_dependence_bound(
    spec: &ProblemSpec,
    other: &ProblemSpec,
    l: f64,
    m: f64,
) -> Result<f64, AnalysisError> {
    check_controls(spec, other)?;
    let samples = bound_samples(spec);
    let controls = spec.coefficients.controls();
    let k2_inner = (0..controls)
        .map(|ctrl| {
            let a = spec.coefficients.lipschitz[ctrl];
            let b = other.coefficients.lipschitz[ctrl];
            4.0 * l * (a.sigma * a.sigma).min(b.sigma * b.sigma)
                + 2.0 * l * a.b.min(b.b)
                + m * a.c.max(b.c)
                + a.f.min(b.f)
        })
        .fold(0.0, f64::max);
    let k = (32.0 * l * k2_inner).sqrt();
    let mut sigma_term: f64 = 0.0;
    let mut rest_term: f64 = 0.0;
    for ctrl in 0..controls {
        let inf_c = spec.inf_c(ctrl, &samples).max(other.inf_c(ctrl, &samples));
        let (ds, db, dc, df) = coefficient_gaps(spec, other, ctrl, &samples);
        sigma_term = sigma_term.max(quotient(k * ds, inf_c).min(f64::INFINITY));
        rest_term = rest_term.max(quotient(2.0 * l * db + m * dc + df, inf_c));
    }
    // 0 * inf from identical sigma with nonpositive c is still 0.
    if sigma_term.is_nan() {
        sigma_term = 0.0;
    }
    Ok(sigma_term + rest_term)
}

/// Discrete-dependence bound: as the continuous one but without the
/// sigma term, valid only when both specs share the same diffusion
/// matrix (`L = sqrt(N) [u_h]_1 v [u_h_bar]_1`, `M = |u_h|_0 v |u_h_bar|_0`).
pub fn discrete_dependence_bound(
    spec: &ProblemSpec,
    other: &ProblemSpec,
    l: f64,
    m: f64,
) -> Result<f64, AnalysisError> {
    check_controls(spec, other)?;
    let samples = bound_samples(spec);
    let controls = spec.coefficients.controls();
    for ctrl in 0..controls {
        for x in samples.iter().take(64) {
            let a1 = spec.coefficients.eval_a(ctrl, x);
            let a2 = other.coefficients.eval_a(ctrl, x);
            if a1
                .iter()
                .zip(&a2)
                .any(|(p, q)| (p - q).abs() > 1e-12)
            {
                return Err(AnalysisError::DifferingDiffusion);
            }
        }
    }
    let mut bound: f64 = 0.0;
    for ctrl in 0..controls {
        let inf_c = spec.inf_c(ctrl, &samples).max(other.inf_c(ctrl, &samples));
        let (_, db, dc, df) = coefficient_gaps(spec, other, ctrl, &samples);
        bound = bound.max(quotient(2.0 * l * db + m * dc + df, inf_c));
    }
    Ok(bound)
}

/// Solve on a `k`-refined grid and restrict to the coarse nodes by exact
/// injection; stand-in for the unknown exact solution in rate studies.
/// For the control scheme the refined run keeps the step-grid coupling
/// `h_grid = h_scheme^2`.
pub fn reference_solution(
    spec: &ProblemSpec,
    grid: &Arc<Grid>,
    scheme: SchemeChoice,
    k: usize,
    config: &SolverConfig,
) -> Result<(GridFunction, SolveReport), AnalysisError> {
    if k < 1 {
        return Err(AnalysisError::BadRefinement);
    }
    let fine_h = grid.spacing() / k as f64;
    let fine_grid = Arc::new(
        Grid::new(&spec.bounds, fine_h, grid.policy()).expect("refined grid"),
    );
    let fine_choice = match scheme {
        SchemeChoice::Fdm => SchemeChoice::Fdm,
        SchemeChoice::Control { .. } => SchemeChoice::Control {
            h_scheme: fine_h.sqrt(),
        },
    };
    let op = build_operator(spec, fine_grid.clone(), fine_choice)?;
    let (fine, report) = if spec.obstacle.is_some() {
        solver::solve_obstacle(&op, config, None)?
    } else {
        solver::fixed_point_solve(&op, config, None)?
    };
    let mut values = Vec::with_capacity(grid.node_count());
    for node in grid.iter_nodes() {
        let coarse_idx = grid.multi_index(node);
        let fine_idx: Vec<usize> = coarse_idx.iter().map(|&i| i * k).collect();
        values.push(fine.value(fine_grid.flat_index(&fine_idx)));
    }
    Ok((
        GridFunction::new(grid.clone(), values).expect("restriction of finite field"),
        report,
    ))
}

/// Least-squares fit of `log(error) = slope * log(parameter) + intercept`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateFit {
    pub samples: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn fit_rate(samples: &[(f64, f64)]) -> Result<RateFit, AnalysisError> {
    if samples.len() < 3 {
        return Err(AnalysisError::TooFewSamples(samples.len()));
    }
    for &(p, e) in samples {
        if !(p > 0.0 && e > 0.0) {
            return Err(AnalysisError::NonpositiveSample(p, e));
        }
    }
    let n = samples.len() as f64;
    let xs: Vec<f64> = samples.iter().map(|&(p, _)| p.ln()).collect();
    let ys: Vec<f64> = samples.iter().map(|&(_, e)| e.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy > 0.0 {
        (sxy * sxy) / (sxx * syy)
    } else {
        1.0
    };
    Ok(RateFit {
        samples: samples.to_vec(),
        slope,
        intercept,
        r_squared,
    })
}
