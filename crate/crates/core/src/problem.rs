//! Continuous problem descriptions: control sets, coefficient functions,
//! obstacles, and sampled validation of the structural assumptions the
//! schemes rely on.
//!
//! A problem is the residual operator
//!
//! ```text
//! F(x, u, Du, D2u) = opt_ctrl { -1/2 tr[a(x) D2u] - b(x).Du + c(x) u + f(x, u) }
//! ```
//!
//! with `a = sigma sigma^T`, `opt` either a sup over one finite control set
//! or an inf-sup over two, and optionally the obstacle constraint
//! `min{F[u], u - g} = 0`. Lipschitz/Hoelder constants are user-declared
//! and spot-checked by sampling; exact seminorms of expressions are not
//! computable in general.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::expr::Expression;

#[derive(Debug, Error, PartialEq)]
pub enum ProblemError {
    #[error("control count must be at least 1")]
    EmptyControlSet,
    #[error("coefficient array `{name}` has {got} entries, expected {expected}")]
    CoefficientCount {
        name: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("expression in `{name}` references x{var} but dim is {dim}")]
    VariableOutOfRange {
        name: &'static str,
        var: usize,
        dim: usize,
    },
    #[error("box axis {axis} is empty or inverted")]
    EmptyBox { axis: usize },
    #[error("lambda bounds must satisfy 0 < lambda_lo <= lambda_hi")]
    BadLambda,
}

/// Finite discretization of a compact control set. When `second_axis` is
/// present the problem has inf-sup (Isaacs) structure: the outer axis is
/// the inf, the second the sup.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid {
    count: usize,
    labels: Option<Vec<String>>,
    second_axis: Option<Box<ControlGrid>>,
}

impl ControlGrid {
    pub fn new(count: usize) -> Result<ControlGrid, ProblemError> {
        if count == 0 {
            return Err(ProblemError::EmptyControlSet);
        }
        Ok(ControlGrid {
            count,
            labels: None,
            second_axis: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> ControlGrid {
        self.labels = Some(labels);
        self
    }

    pub fn with_second_axis(mut self, second: ControlGrid) -> ControlGrid {
        self.second_axis = Some(Box::new(second));
        self
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn second_axis(&self) -> Option<&ControlGrid> {
        self.second_axis.as_deref()
    }

    /// (outer, inner) axis sizes; inner is 1 without a second axis.
    pub fn shape(&self) -> (usize, usize) {
        (
            self.count,
            self.second_axis.as_ref().map_or(1, |s| s.count),
        )
    }

    /// Total number of control combinations.
    pub fn total(&self) -> usize {
        let (a, b) = self.shape();
        a * b
    }
}

/// Declared Lipschitz constants per control: `[sigma]_1`, `[b]_1`, `[c]_1`,
/// `[f(.,r)]_1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzConstants {
    pub sigma: f64,
    pub b: f64,
    pub c: f64,
    pub f: f64,
}

impl LipschitzConstants {
    pub fn zero() -> LipschitzConstants {
        LipschitzConstants {
            sigma: 0.0,
            b: 0.0,
            c: 0.0,
            f: 0.0,
        }
    }
}

/// Per-control coefficient functions. `sigma` is an `N x P` matrix of
/// expressions (row-major), the diffusion matrix is `a = sigma sigma^T`
/// and the second-order operator is `-1/2 tr[a D2 u]`. The zero-order rate
/// `c` is kept separate from `f` because the transition-weight and a
/// priori bound formulas need it explicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet {
    dim: usize,
    p_cols: usize,
    sigma: Vec<Vec<Expression>>,
    b: Vec<Vec<Expression>>,
    c: Vec<Expression>,
    f: Vec<Expression>,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub lipschitz: Vec<LipschitzConstants>,
}

impl CoefficientSet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dim: usize,
        p_cols: usize,
        controls: usize,
        sigma: Vec<Vec<Expression>>,
        b: Vec<Vec<Expression>>,
        c: Vec<Expression>,
        f: Vec<Expression>,
        lambda_lo: f64,
        lambda_hi: f64,
        lipschitz: Vec<LipschitzConstants>,
    ) -> Result<CoefficientSet, ProblemError> {
        let check_len = |name: &'static str, got: usize, expected: usize| {
            if got == expected {
                Ok(())
            } else {
                Err(ProblemError::CoefficientCount {
                    name,
                    got,
                    expected,
                })
            }
        };
        check_len("sigma", sigma.len(), controls)?;
        check_len("b", b.len(), controls)?;
        check_len("c", c.len(), controls)?;
        check_len("f", f.len(), controls)?;
        check_len("lipschitz", lipschitz.len(), controls)?;
        for s in &sigma {
            check_len("sigma entries", s.len(), dim * p_cols)?;
        }
        for v in &b {
            check_len("b entries", v.len(), dim)?;
        }
        if !(lambda_lo > 0.0 && lambda_lo <= lambda_hi) {
            return Err(ProblemError::BadLambda);
        }
        let set = CoefficientSet {
            dim,
            p_cols,
            sigma,
            b,
            c,
            f,
            lambda_lo,
            lambda_hi,
            lipschitz,
        };
        set.check_vars()?;
        Ok(set)
    }

    fn check_vars(&self) -> Result<(), ProblemError> {
        let check = |name: &'static str, e: &Expression| -> Result<(), ProblemError> {
            if let Some(v) = e.max_var() {
                if v >= self.dim {
                    return Err(ProblemError::VariableOutOfRange {
                        name,
                        var: v + 1,
                        dim: self.dim,
                    });
                }
            }
            Ok(())
        };
        for s in &self.sigma {
            for e in s {
                check("sigma", e)?;
            }
        }
        for v in &self.b {
            for e in v {
                check("b", e)?;
            }
        }
        for e in &self.c {
            check("c", e)?;
        }
        for e in &self.f {
            check("f", e)?;
        }
        Ok(())
    }

    pub fn controls(&self) -> usize {
        self.c.len()
    }

    pub fn p_cols(&self) -> usize {
        self.p_cols
    }

    pub fn sigma_exprs(&self, ctrl: usize) -> &[Expression] {
        &self.sigma[ctrl]
    }

    pub fn b_exprs(&self, ctrl: usize) -> &[Expression] {
        &self.b[ctrl]
    }

    pub fn c_expr(&self, ctrl: usize) -> &Expression {
        &self.c[ctrl]
    }

    pub fn f_expr(&self, ctrl: usize) -> &Expression {
        &self.f[ctrl]
    }

    /// Evaluate `sigma` at `x` as a row-major `N x P` matrix.
    pub fn eval_sigma(&self, ctrl: usize, x: &[f64]) -> Vec<f64> {
        self.sigma[ctrl].iter().map(|e| e.eval(x, 0.0)).collect()
    }

    /// Evaluate the diffusion matrix `a = sigma sigma^T` at `x`
    /// (row-major `N x N`).
    pub fn eval_a(&self, ctrl: usize, x: &[f64]) -> Vec<f64> {
        let s = self.eval_sigma(ctrl, x);
        let n = self.dim;
        let p = self.p_cols;
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..p {
                    acc += s[i * p + k] * s[j * p + k];
                }
                a[i * n + j] = acc;
            }
        }
        a
    }

    pub fn eval_b(&self, ctrl: usize, x: &[f64]) -> Vec<f64> {
        self.b[ctrl].iter().map(|e| e.eval(x, 0.0)).collect()
    }

    pub fn eval_c(&self, ctrl: usize, x: &[f64]) -> f64 {
        self.c[ctrl].eval(x, 0.0)
    }

    pub fn eval_f(&self, ctrl: usize, x: &[f64], r: f64) -> f64 {
        self.f[ctrl].eval(x, r)
    }

    pub fn f_uses_r(&self, ctrl: usize) -> bool {
        self.f[ctrl].uses_r()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObstacleRegularity {
    /// Case (i): Lipschitz with `|D^2 g^-|_0` bounded; penalization rate 1.
    SemiconvexLipschitz,
    /// Case (ii): Lipschitz only; penalization rate 1/2.
    Lipschitz,
    /// Case (iii): Hoelder with exponent `mu` in (0, 1); rate `mu/2`.
    Hoelder(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Obstacle {
    pub g: Expression,
    pub regularity: ObstacleRegularity,
    /// `[g]_mu` or `[g]_1` depending on the regularity case.
    pub seminorm: f64,
    /// `|D^2 g^-|_0`, required for the semiconvex case.
    pub d2_minus_bound: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sense {
    SupOverControls,
    InfSup,
}

/// Which lambda0 formula to use: the FDM form of (A7) or the continuous /
/// control-scheme form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeFamily {
    Fdm,
    Continuous,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub dim: usize,
    pub bounds: Vec<(f64, f64)>,
    pub controls: ControlGrid,
    pub coefficients: CoefficientSet,
    pub obstacle: Option<Obstacle>,
    pub sense: Sense,
}

impl ProblemSpec {
    pub fn new(
        dim: usize,
        bounds: Vec<(f64, f64)>,
        controls: ControlGrid,
        coefficients: CoefficientSet,
        obstacle: Option<Obstacle>,
        sense: Sense,
    ) -> Result<ProblemSpec, ProblemError> {
        for (axis, &(a, b)) in bounds.iter().enumerate() {
            if !(b > a) {
                return Err(ProblemError::EmptyBox { axis });
            }
        }
        let expected = controls.total();
        if coefficients.controls() != expected {
            return Err(ProblemError::CoefficientCount {
                name: "controls",
                got: coefficients.controls(),
                expected,
            });
        }
        if let Some(obs) = &obstacle {
            if let Some(v) = obs.g.max_var() {
                if v >= dim {
                    return Err(ProblemError::VariableOutOfRange {
                        name: "g",
                        var: v + 1,
                        dim,
                    });
                }
            }
        }
        Ok(ProblemSpec {
            dim,
            bounds,
            controls,
            coefficients,
            obstacle,
            sense,
        })
    }

    pub fn obstacle_value(&self, x: &[f64]) -> Option<f64> {
        self.obstacle.as_ref().map(|o| o.g.eval(x, 0.0))
    }

    /// Deterministic sample points: a coarse lattice (nodes plus midpoints)
    /// and seeded uniform draws from the box.
    pub fn sample_points(&self, random: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut pts = Vec::new();
        let per_axis = match self.dim {
            1 => 17,
            2 => 7,
            _ => 3,
        };
        let mut idx = vec![0usize; self.dim];
        loop {
            let p: Vec<f64> = idx
                .iter()
                .zip(&self.bounds)
                .map(|(&i, &(lo, hi))| lo + (hi - lo) * (0.5 + i as f64) / per_axis as f64)
                .collect();
            pts.push(p);
            let mut axis = self.dim;
            let done = loop {
                if axis == 0 {
                    break true;
                }
                axis -= 1;
                if idx[axis] + 1 < per_axis {
                    idx[axis] += 1;
                    break false;
                }
                idx[axis] = 0;
            };
            if done {
                break;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..random {
            let p: Vec<f64> = self
                .bounds
                .iter()
                .map(|&(lo, hi)| rng.gen_range(lo..hi))
                .collect();
            pts.push(p);
        }
        pts
    }

    /// Lower envelope of `c` over sampled points, per control.
    pub fn inf_c(&self, ctrl: usize, samples: &[Vec<f64>]) -> f64 {
        samples
            .iter()
            .map(|x| self.coefficients.eval_c(ctrl, x))
            .fold(f64::INFINITY, f64::min)
    }

    /// The constant `lambda_0` for the requested scheme family:
    /// `sup_ctrl { inf_x c - 2 sqrt(N) [b]_1 }` for the FDM and
    /// `sup_ctrl { inf_x c - [sigma]_1^2 - [b]_1 }` for the continuous /
    /// control form. Nonpositive values are returned as-is; callers that
    /// need a contraction must check the sign.
    pub fn derive_lambda0(&self, family: SchemeFamily) -> f64 {
        let samples = self.sample_points(64, 0x1a0b);
        let mut best = f64::NEG_INFINITY;
        for ctrl in 0..self.coefficients.controls() {
            let inf_c = self.inf_c(ctrl, &samples);
            let lip = self.coefficients.lipschitz[ctrl];
            let v = match family {
                SchemeFamily::Fdm => inf_c - 2.0 * (self.dim as f64).sqrt() * lip.b,
                SchemeFamily::Continuous => inf_c - lip.sigma * lip.sigma - lip.b,
            };
            best = best.max(v);
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AssumptionStatus {
    Holds,
    Violated { witness: Vec<f64>, detail: String },
    NotChecked,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionCheck {
    pub id: &'static str,
    pub status: AssumptionStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<AssumptionCheck>,
}

impl ValidationReport {
    pub fn status(&self, id: &str) -> Option<&AssumptionStatus> {
        self.checks.iter().find(|c| c.id == id).map(|c| &c.status)
    }

    pub fn holds(&self, id: &str) -> bool {
        matches!(self.status(id), Some(AssumptionStatus::Holds))
    }

    pub fn all_hold(&self, ids: &[&str]) -> bool {
        ids.iter().all(|id| self.holds(id))
    }
}

/// Sampling plan for assumption validation. Fixed seed so reports are
/// reproducible.
#[derive(Debug, Clone, Copy)]
pub struct SamplingPlan {
    pub random_points: usize,
    pub seed: u64,
    pub tolerance: f64,
    /// Range of zero-order arguments used for the monotonicity quotient.
    pub r_range: (f64, f64),
}

impl Default for SamplingPlan {
    fn default() -> Self {
        SamplingPlan {
            random_points: 1000,
            seed: 0x5eed,
            tolerance: 1e-9,
            r_range: (-2.0, 2.0),
        }
    }
}

impl ProblemSpec {
    /// Check the structural assumptions at sampled points. Violations are
    /// report entries, never errors.
    pub fn validate_assumptions(&self, plan: &SamplingPlan) -> ValidationReport {
        let samples = self.sample_points(plan.random_points, plan.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0x9e3779b97f4a7c15);
        let tol = plan.tolerance;
        let n = self.dim;
        let controls = self.coefficients.controls();

        let mut checks = Vec::new();
        let mut push = |id: &'static str, status: AssumptionStatus| {
            checks.push(AssumptionCheck { id, status });
        };

        // (A1): sampled Lipschitz quotients of sigma and b stay below the
        // declared constants. Pairs are a sample point plus a nearby
        // perturbation.
        let mut a1 = AssumptionStatus::Holds;
        'a1: for x in samples.iter().take(200) {
            let y = perturb(x, &self.bounds, &mut rng);
            let dist = distance(x, &y);
            if dist < 1e-12 {
                continue;
            }
            for ctrl in 0..controls {
                let lip = self.coefficients.lipschitz[ctrl];
                let sx = self.coefficients.eval_sigma(ctrl, x);
                let sy = self.coefficients.eval_sigma(ctrl, &y);
                let ds = frobenius_diff(&sx, &sy);
                let bx = self.coefficients.eval_b(ctrl, x);
                let by = self.coefficients.eval_b(ctrl, &y);
                let db = distance(&bx, &by);
                let slack = 1.0 + 1e-6;
                if ds / dist > lip.sigma * slack + tol
                    || db / dist > lip.b * slack + tol
                {
                    a1 = AssumptionStatus::Violated {
                        witness: x.clone(),
                        detail: format!(
                            "control {ctrl}: sampled quotients sigma {:.6}, b {:.6} \
                             exceed declared ({}, {})",
                            ds / dist,
                            db / dist,
                            lip.sigma,
                            lip.b
                        ),
                    };
                    break 'a1;
                }
            }
        }
        push("A1", a1);

        // (A2): monotonicity of the zero-order map r -> c(x) r + f(x, r).
        let (r_lo, r_hi) = plan.r_range;
        let mut a2 = AssumptionStatus::Holds;
        'a2: for x in samples.iter().take(plan.random_points.max(100)) {
            let r = rng.gen_range(r_lo..r_hi);
            let s = rng.gen_range(r_lo..r_hi);
            let (r, s) = if r > s { (r, s) } else { (s, r) };
            if r - s < 1e-9 {
                continue;
            }
            for ctrl in 0..controls {
                let c = self.coefficients.eval_c(ctrl, x);
                let q = (c * (r - s) + self.coefficients.eval_f(ctrl, x, r)
                    - self.coefficients.eval_f(ctrl, x, s))
                    / (r - s);
                if q < self.coefficients.lambda_lo - tol
                    || q > self.coefficients.lambda_hi + tol
                {
                    a2 = AssumptionStatus::Violated {
                        witness: x.clone(),
                        detail: format!(
                            "control {ctrl}: quotient {q:.6} outside \
                             [{}, {}] at r={r:.4}, s={s:.4}",
                            self.coefficients.lambda_lo, self.coefficients.lambda_hi
                        ),
                    };
                    break 'a2;
                }
            }
        }
        push("A2", a2);

        // (A3) is a proof-level bound on shaken solutions.
        push("A3", AssumptionStatus::NotChecked);

        // (A4): a independent of x.
        let center: Vec<f64> = self.bounds.iter().map(|&(lo, hi)| 0.5 * (lo + hi)).collect();
        let mut a4 = AssumptionStatus::Holds;
        'a4: for x in samples.iter().take(100) {
            for ctrl in 0..controls {
                let ax = self.coefficients.eval_a(ctrl, x);
                let a0 = self.coefficients.eval_a(ctrl, &center);
                if frobenius_diff(&ax, &a0) > 1e-10 {
                    a4 = AssumptionStatus::Violated {
                        witness: x.clone(),
                        detail: format!("control {ctrl}: a varies with x"),
                    };
                    break 'a4;
                }
            }
        }
        push("A4", a4);

        // (A5): diagonal dominance of a.
        let mut a5 = AssumptionStatus::Holds;
        'a5: for x in samples.iter().take(100) {
            for ctrl in 0..controls {
                let a = self.coefficients.eval_a(ctrl, x);
                for i in 0..n {
                    let off: f64 = (0..n)
                        .filter(|&j| j != i)
                        .map(|j| a[i * n + j].abs())
                        .sum();
                    if a[i * n + i] - off < -tol {
                        a5 = AssumptionStatus::Violated {
                            witness: x.clone(),
                            detail: format!(
                                "control {ctrl}: row {i}: a_ii - sum|a_ij| = {:.6}",
                                a[i * n + i] - off
                            ),
                        };
                        break 'a5;
                    }
                }
            }
        }
        push("A5", a5);

        // (A6): normalization sum_i { a_ii - sum_{j!=i} |a_ij| + |b_i| } <= 1.
        let mut a6 = AssumptionStatus::Holds;
        'a6: for x in &samples {
            for ctrl in 0..controls {
                let a = self.coefficients.eval_a(ctrl, x);
                let b = self.coefficients.eval_b(ctrl, x);
                let mut total = 0.0;
                for i in 0..n {
                    let off: f64 = (0..n)
                        .filter(|&j| j != i)
                        .map(|j| a[i * n + j].abs())
                        .sum();
                    total += a[i * n + i] - off + b[i].abs();
                }
                if total > 1.0 + tol {
                    a6 = AssumptionStatus::Violated {
                        witness: x.clone(),
                        detail: format!("control {ctrl}: normalization sum {total:.6} > 1"),
                    };
                    break 'a6;
                }
            }
        }
        push("A6", a6);

        // (A7): lambda_0 > 0 (FDM form).
        let lambda0 = self.derive_lambda0(SchemeFamily::Fdm);
        push(
            "A7",
            if lambda0 > 0.0 {
                AssumptionStatus::Holds
            } else {
                AssumptionStatus::Violated {
                    witness: center.clone(),
                    detail: format!("lambda_0 = {lambda0:.6} <= 0"),
                }
            },
        );

        // (A8): obstacle regularity against the declared seminorm, and the
        // second-difference negative part for the semiconvex case.
        let a8 = match &self.obstacle {
            None => AssumptionStatus::NotChecked,
            Some(obs) => self.check_obstacle(obs, &samples, tol, &mut rng),
        };
        push("A8", a8);

        ValidationReport { checks }
    }

    fn check_obstacle(
        &self,
        obs: &Obstacle,
        samples: &[Vec<f64>],
        tol: f64,
        rng: &mut ChaCha8Rng,
    ) -> AssumptionStatus {
        let mu = match obs.regularity {
            ObstacleRegularity::Hoelder(mu) => mu,
            _ => 1.0,
        };
        let slack = 1.0 + 1e-6;
        for x in samples.iter().take(400) {
            let y = perturb(x, &self.bounds, rng);
            let dist = distance(x, &y);
            if dist < 1e-10 {
                continue;
            }
            let q = (obs.g.eval(x, 0.0) - obs.g.eval(&y, 0.0)).abs() / dist.powf(mu);
            if q > obs.seminorm * slack + tol {
                return AssumptionStatus::Violated {
                    witness: x.clone(),
                    detail: format!(
                        "sampled Hoelder quotient {q:.6} exceeds declared {}",
                        obs.seminorm
                    ),
                };
            }
        }
        if obs.regularity == ObstacleRegularity::SemiconvexLipschitz {
            let bound = match obs.d2_minus_bound {
                Some(b) => b,
                None => {
                    return AssumptionStatus::Violated {
                        witness: vec![],
                        detail: "semiconvex case declared without |D^2 g^-|_0 bound"
                            .to_string(),
                    }
                }
            };
            for x in samples.iter().take(200) {
                for axis in 0..self.dim {
                    let t = 1e-3 * (self.bounds[axis].1 - self.bounds[axis].0);
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[axis] += t;
                    xm[axis] -= t;
                    let d2 = (obs.g.eval(&xp, 0.0) - 2.0 * obs.g.eval(x, 0.0)
                        + obs.g.eval(&xm, 0.0))
                        / (t * t);
                    if -d2 > bound * (1.0 + 1e-4) + tol {
                        return AssumptionStatus::Violated {
                            witness: x.clone(),
                            detail: format!(
                                "second-difference negative part {:.6} exceeds \
                                 declared {bound}",
                                -d2
                            ),
                        };
                    }
                }
            }
        }
        AssumptionStatus::Holds
    }
}

fn perturb(x: &[f64], bounds: &[(f64, f64)], rng: &mut ChaCha8Rng) -> Vec<f64> {
    x.iter()
        .zip(bounds)
        .map(|(&xi, &(lo, hi))| {
            let step = 1e-3 * (hi - lo) * rng.gen_range(-1.0..1.0f64);
            (xi + step).clamp(lo, hi)
        })
        .collect()
}

fn distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

fn frobenius_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
