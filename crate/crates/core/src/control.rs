//! The semi-discrete control scheme: the averaging operator
//!
//! ```text
//! Pi_h u(x) = 1/(2N) sum_m [ u(x + h b + sqrt(h) sigma_m)
//!                          + u(x + h b - sqrt(h) sigma_m) ]
//! ```
//!
//! over the columns `sigma_m` of `sigma(x)`, realized on a grid through
//! multilinear interpolation, and the scheme residual
//!
//! ```text
//! S(h, x, r, [u]_x) = opt_ctrl { [ r - (1 - h c(x)) Pi_h u(x) ] / h
//!                                + f(x, r) }
//! ```
//!
//! whose root recovers the value form `u = opt~ { (1-hc) Pi_h u - h f }`.
//! Unlike the FDM, `a = sigma sigma^T` may depend on `x`. The scheme step
//! `h` is independent of the grid spacing; the default coupling is
//! `h_grid = h_scheme^2` so interpolation error does not dominate the
//! O(h_scheme) consistency. Interpolation is multilinear only: its
//! weights are nonnegative and sum to one, which keeps the realized
//! scheme monotone.

use std::sync::Arc;

use thiserror::Error;

use crate::fdm::{combine_residuals, combine_roots, continuous_residual, SmoothTestFunction};
use crate::grid::{Grid, GridFunction};
use crate::problem::ProblemSpec;

#[derive(Debug, Error, PartialEq)]
pub enum ControlError {
    #[error("scheme step {h} with sup|c| = {sup_c} breaks monotonicity (need h sup|c| < 1)")]
    StepTooLarge { h: f64, sup_c: f64 },
    #[error("scheme step must be positive, got {0}")]
    BadStep(f64),
    #[error("grid dimension {grid} does not match problem dimension {problem}")]
    DimMismatch { grid: usize, problem: usize },
}

/// Multilinear interpolation on a grid; the only kind offered.
pub struct InterpolationRule {
    grid: Arc<Grid>,
}

impl InterpolationRule {
    pub fn new(grid: Arc<Grid>) -> InterpolationRule {
        InterpolationRule { grid }
    }

    /// Corner (flat index, weight) pairs for evaluating at `y`; weights
    /// are nonnegative and sum to one. Out-of-box corners resolve through
    /// the boundary policy.
    pub fn weights(&self, y: &[f64]) -> Vec<(usize, f64)> {
        let g = &self.grid;
        let n = g.dim();
        let h = g.spacing();
        let lo: Vec<f64> = g.bounds().iter().map(|&(a, _)| a).collect();
        let mut base = Vec::with_capacity(n);
        let mut frac = Vec::with_capacity(n);
        for axis in 0..n {
            let t = (y[axis] - lo[axis]) / h;
            let b = t.floor();
            base.push(b as i64);
            frac.push((t - b).clamp(0.0, 1.0));
        }
        let mut out = Vec::with_capacity(1 << n);
        for corner in 0..(1usize << n) {
            let mut w = 1.0;
            let mut flat = 0;
            for axis in 0..n {
                let hi = (corner >> axis) & 1 == 1;
                w *= if hi { frac[axis] } else { 1.0 - frac[axis] };
                let i = base[axis] + if hi { 1 } else { 0 };
                flat = flat * g.nodes_per_axis()[axis] + g.resolve_axis_index(axis, i);
            }
            if w != 0.0 {
                out.push((flat, w));
            }
        }
        out
    }

    pub fn interpolate(&self, u: &GridFunction, y: &[f64]) -> f64 {
        self.weights(y)
            .into_iter()
            .map(|(k, w)| w * u.value(k))
            .sum()
    }
}

/// Assembled control-scheme operator: per (node, control) the aggregated
/// interpolation stencil of the 2N sample points, plus zero-order data.
/// Immutable after construction; evaluation is pure.
pub struct ControlOperator {
    grid: Arc<Grid>,
    spec: ProblemSpec,
    h: f64,
    /// nodes x controls stencils: (flat index, weight) with weights
    /// summing to one.
    stencils: Vec<Vec<(usize, f64)>>,
    c: Vec<Vec<f64>>,
    f0: Vec<Vec<f64>>,
    uses_r: Vec<bool>,
    points: Vec<Vec<f64>>,
}

impl ControlOperator {
    pub fn new(
        spec: &ProblemSpec,
        grid: Arc<Grid>,
        h_scheme: f64,
    ) -> Result<ControlOperator, ControlError> {
        if !(h_scheme > 0.0) {
            return Err(ControlError::BadStep(h_scheme));
        }
        if grid.dim() != spec.dim {
            return Err(ControlError::DimMismatch {
                grid: grid.dim(),
                problem: spec.dim,
            });
        }
        let n = spec.dim;
        let p = spec.coefficients.p_cols();
        let controls = spec.coefficients.controls();
        let rule = InterpolationRule::new(grid.clone());
        let points: Vec<Vec<f64>> = grid
            .iter_nodes()
            .map(|node| grid.point_of_flat(node))
            .collect();

        let mut sup_c: f64 = 0.0;
        let mut c_all = Vec::with_capacity(controls);
        let mut f0_all = Vec::with_capacity(controls);
        let mut uses_r = Vec::with_capacity(controls);
        for ctrl in 0..controls {
            let c_row: Vec<f64> = points
                .iter()
                .map(|x| spec.coefficients.eval_c(ctrl, x))
                .collect();
            for &c in &c_row {
                sup_c = sup_c.max(c.abs());
            }
            c_all.push(c_row);
            f0_all.push(
                points
                    .iter()
                    .map(|x| spec.coefficients.eval_f(ctrl, x, 0.0))
                    .collect(),
            );
            uses_r.push(spec.coefficients.f_uses_r(ctrl));
        }
        if h_scheme * sup_c >= 1.0 {
            return Err(ControlError::StepTooLarge {
                h: h_scheme,
                sup_c,
            });
        }

        let sqrt_h = h_scheme.sqrt();
        let mut stencils = Vec::with_capacity(points.len() * controls);
        for x in &points {
            for ctrl in 0..controls {
                let b = spec.coefficients.eval_b(ctrl, x);
                let sigma = spec.coefficients.eval_sigma(ctrl, x);
                let mut agg: Vec<(usize, f64)> = Vec::new();
                let mut push = |k: usize, w: f64| {
                    if let Some(e) = agg.iter_mut().find(|e| e.0 == k) {
                        e.1 += w;
                    } else {
                        agg.push((k, w));
                    }
                };
                let share = 1.0 / (2 * n) as f64;
                for m in 0..n {
                    for sign in [1.0, -1.0] {
                        let y: Vec<f64> = (0..n)
                            .map(|i| {
                                // Columns beyond sigma's width act as zero.
                                let s = if m < p { sigma[i * p + m] } else { 0.0 };
                                x[i] + h_scheme * b[i] + sign * sqrt_h * s
                            })
                            .collect();
                        for (k, w) in rule.weights(&y) {
                            push(k, share * w);
                        }
                    }
                }
                stencils.push(agg);
            }
        }
        Ok(ControlOperator {
            grid,
            spec: spec.clone(),
            h: h_scheme,
            stencils,
            c: c_all,
            f0: f0_all,
            uses_r,
            points,
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn h_scheme(&self) -> f64 {
        self.h
    }

    pub fn controls(&self) -> usize {
        self.c.len()
    }

    pub fn c_at(&self, node: usize, control: usize) -> f64 {
        self.c[control][node]
    }

    pub fn f_at(&self, node: usize, control: usize, r: f64) -> f64 {
        if self.uses_r[control] {
            self.spec
                .coefficients
                .eval_f(control, &self.points[node], r)
        } else {
            self.f0[control][node]
        }
    }

    pub fn f_uses_r(&self, control: usize) -> bool {
        self.uses_r[control]
    }

    /// The realized averaging operator at a node.
    pub fn pi_h(&self, values: &[f64], node: usize, control: usize) -> f64 {
        self.stencils[node * self.controls() + control]
            .iter()
            .map(|&(k, w)| w * values[k])
            .sum()
    }

    /// Residual of one control at (node, r).
    pub fn control_residual(&self, values: &[f64], node: usize, control: usize, r: f64) -> f64 {
        let pi = self.pi_h(values, node, control);
        (r - (1.0 - self.h * self.c_at(node, control)) * pi) / self.h
            + self.f_at(node, control, r)
    }

    /// The combined scheme residual at (node, r).
    pub fn apply(&self, values: &[f64], node: usize, r: f64) -> f64 {
        let shape = self.spec.controls.shape();
        let s: Vec<f64> = (0..self.controls())
            .map(|ctrl| self.control_residual(values, node, ctrl, r))
            .collect();
        combine_residuals(self.spec.sense, shape, &s)
    }

    /// One application of the value-form fixed-point map
    /// `opt~ { (1 - h c) Pi_h u - h f(x, u(x)) }`.
    pub fn t_h_value(&self, values: &[f64], node: usize) -> f64 {
        let r_old = values[node];
        let shape = self.spec.controls.shape();
        let v: Vec<f64> = (0..self.controls())
            .map(|ctrl| {
                (1.0 - self.h * self.c_at(node, ctrl)) * self.pi_h(values, node, ctrl)
                    - self.h * self.f_at(node, ctrl, r_old)
            })
            .collect();
        combine_roots(self.spec.sense, shape, &v)
    }

    pub fn t_h_apply(&self, u: &GridFunction) -> GridFunction {
        let values = u.values();
        let out: Vec<f64> = self
            .grid
            .iter_nodes()
            .map(|node| self.t_h_value(values, node))
            .collect();
        GridFunction::new(self.grid.clone(), out).expect("map preserves finiteness")
    }
}

/// Free-standing Pi_h per the operator definition; builds the stencil on
/// the fly.
pub fn pi_h(
    spec: &ProblemSpec,
    u: &GridFunction,
    node: usize,
    control: usize,
    h_scheme: f64,
) -> f64 {
    let grid = u.grid();
    let n = spec.dim;
    let p = spec.coefficients.p_cols();
    let rule = InterpolationRule::new(grid.clone());
    let x = grid.point_of_flat(node);
    let b = spec.coefficients.eval_b(control, &x);
    let sigma = spec.coefficients.eval_sigma(control, &x);
    let sqrt_h = h_scheme.sqrt();
    let mut acc = 0.0;
    for m in 0..n {
        for sign in [1.0, -1.0] {
            let y: Vec<f64> = (0..n)
                .map(|i| {
                    let s = if m < p { sigma[i * p + m] } else { 0.0 };
                    x[i] + h_scheme * b[i] + sign * sqrt_h * s
                })
                .collect();
            acc += rule.interpolate(u, &y);
        }
    }
    acc / (2 * n) as f64
}

/// Measured consistency error sup_x |F(phi) - S(phi)| of the realized
/// scheme (interpolation included) against the continuous operator, and
/// an upper bound
///
/// ```text
/// K (|D^2| + |D^3| + |D^4|) h  +  K_c |D phi| h  +  C |D^2| h_grid^2 / h
/// ```
///
/// The `|D phi|` term is the zero-order correction `c (Pi_h - id)`, absent
/// from the pure transport part; the last term is the interpolation
/// error.
pub fn control_consistency_error(
    spec: &ProblemSpec,
    grid: &Arc<Grid>,
    h_scheme: f64,
    test: &SmoothTestFunction,
    d1: f64,
) -> Result<(f64, f64), ControlError> {
    let phi_field = crate::grid::eval_on_grid(|x| (test.phi)(x), grid)
        .expect("test function must be finite on the grid");
    let op = ControlOperator::new(spec, grid.clone(), h_scheme)?;
    let n = spec.dim;
    let bounds = grid.bounds();
    let sqrt_h = h_scheme.sqrt();
    let mut measured: f64 = 0.0;
    let mut k_rest: f64 = 0.0;
    let mut k_grad: f64 = 0.0;
    for node in grid.iter_nodes() {
        let x = grid.point_of_flat(node);
        // Under Clamp, skip nodes whose sample points leave the box:
        // consistency is an interior statement and clamping distorts it.
        if grid.policy() == crate::grid::BoundaryPolicy::Clamp {
            let p = spec.coefficients.p_cols();
            let exits = (0..spec.coefficients.controls()).any(|ctrl| {
                let b = spec.coefficients.eval_b(ctrl, &x);
                let sigma = spec.coefficients.eval_sigma(ctrl, &x);
                (0..n).any(|m| {
                    [1.0, -1.0].iter().any(|sign| {
                        (0..n).any(|i| {
                            let s = if m < p { sigma[i * p + m] } else { 0.0 };
                            let y = x[i] + h_scheme * b[i] + sign * sqrt_h * s;
                            y < bounds[i].0 || y > bounds[i].1
                        })
                    })
                })
            });
            if exits {
                continue;
            }
        }
        let r = (test.phi)(&x);
        let grad = (test.grad)(&x);
        let hess = (test.hess)(&x);
        let f_cont = continuous_residual(spec, &x, r, &grad, &hess);
        let s = op.apply(phi_field.values(), node, r);
        measured = measured.max((f_cont - s).abs());
        for ctrl in 0..spec.coefficients.controls() {
            let b = spec.coefficients.eval_b(ctrl, &x);
            let sigma = spec.coefficients.eval_sigma(ctrl, &x);
            let c = spec.coefficients.eval_c(ctrl, &x).abs();
            let bn = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            let s2 = sigma.iter().map(|v| v * v).sum::<f64>();
            k_rest = k_rest
                .max(bn * bn / 2.0 + c * s2 / 2.0 + bn * s2 / 2.0 + s2 * s2 / 24.0);
            k_grad = k_grad.max(c * bn);
        }
    }
    let interp = (n as f64) * test.d2 * grid.spacing().powi(2) / (4.0 * h_scheme);
    let bound =
        k_rest * (test.d2 + test.d3 + test.d4) * h_scheme + k_grad * d1 * h_scheme + interp;
    Ok((measured, bound))
}
