//! The Kushner-style finite-difference scheme: one-sided and central
//! difference operators, transition-weight assembly, the scheme residual
//! in both weight form and stencil form, and a consistency tester.
//!
//! The residual evaluated here is
//!
//! ```text
//! S(h, x, r, [u]_x) = opt_ctrl { -1/h^2 [ sum_z p(x,x+z) u(x+z) - r ]
//!                                + c(x) r + f(x, r) }
//! ```
//!
//! where the sum runs over the stencil (center value taken as `r`), `opt`
//! follows the problem's sense, and the weights `p` are built from the
//! splits `b = b^+ - b^-`, `a_ij = a_ij^+ - a_ij^-`. The scheme requires
//! `a` constant in `x` and diagonally dominant; weight assembly rejects
//! negative weights outright instead of trusting the normalization
//! assumption.

use std::sync::Arc;

use thiserror::Error;

use crate::grid::{Grid, GridFunction};
use crate::problem::{ProblemSpec, Sense};

#[derive(Debug, Error, PartialEq)]
pub enum FdmError {
    #[error("grid spacing h = {0} exceeds 1; the weight bounds require h <= 1")]
    StepTooLarge(f64),
    #[error(
        "negative weight {value} at node {node}, control {control}, offset {offset:?}"
    )]
    NegativeWeight {
        node: usize,
        control: usize,
        offset: Vec<i64>,
        value: f64,
    },
    #[error("grid dimension {grid} does not match problem dimension {problem}")]
    DimMismatch { grid: usize, problem: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Plus,
    Minus,
}

/// One-sided first difference along `axis`.
pub fn delta_pm(u: &GridFunction, node: &[i64], axis: usize, sign: Sign) -> f64 {
    let h = u.grid().spacing();
    let mut shifted = node.to_vec();
    match sign {
        Sign::Plus => {
            shifted[axis] += 1;
            (u.lookup(&shifted) - u.lookup(node)) / h
        }
        Sign::Minus => {
            shifted[axis] -= 1;
            -(u.lookup(&shifted) - u.lookup(node)) / h
        }
    }
}

/// Central second difference along `axis`.
pub fn delta2(u: &GridFunction, node: &[i64], axis: usize) -> f64 {
    let h = u.grid().spacing();
    let mut up = node.to_vec();
    let mut dn = node.to_vec();
    up[axis] += 1;
    dn[axis] -= 1;
    (u.lookup(&up) - 2.0 * u.lookup(node) + u.lookup(&dn)) / (h * h)
}

/// Seven-point cross difference for the mixed derivative along axes
/// `i`, `j`; `Plus` uses the `e_i + e_j` diagonal, `Minus` the
/// `e_i - e_j` one.
pub fn delta_cross_pm(
    u: &GridFunction,
    node: &[i64],
    i: usize,
    j: usize,
    sign: Sign,
) -> f64 {
    let h = u.grid().spacing();
    let at = |di: i64, dj: i64| {
        let mut idx = node.to_vec();
        idx[i] += di;
        idx[j] += dj;
        u.lookup(&idx)
    };
    let axis_sum = at(1, 0) + at(-1, 0) + at(0, 1) + at(0, -1);
    match sign {
        Sign::Plus => (2.0 * u.lookup(node) + at(1, 1) + at(-1, -1) - axis_sum)
            / (2.0 * h * h),
        Sign::Minus => (axis_sum - 2.0 * u.lookup(node) - at(1, -1) - at(-1, 1))
            / (2.0 * h * h),
    }
}

/// Transition weights for one (node, control) pair: parallel offset/value
/// lists plus the zero-order rate at the node. Offsets are in grid steps;
/// the first entry is the center.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeWeights {
    pub offsets: Vec<Vec<i64>>,
    pub p: Vec<f64>,
    pub c: f64,
}

impl SchemeWeights {
    pub fn row_sum(&self) -> f64 {
        self.p.iter().sum()
    }
}

/// Build the weights at one node for one flattened control index.
///
/// Center: `1 - sum_i { a_ii - sum_{j != i} |a_ij|/2 + h |b_i| }`;
/// axis: `a_ii/2 - sum_{j != i} |a_ij|/2 + h b_i^{+/-}`; diagonal pairs
/// carry `a_ij^{+/-}/2` with the sign pattern tied to the quadrant. Each
/// diagonal offset appears once (the unordered pair {i, j}), which makes
/// the row sum exactly one.
pub fn assemble_weights(
    spec: &ProblemSpec,
    grid: &Grid,
    node: usize,
    control: usize,
) -> Result<SchemeWeights, FdmError> {
    let h = grid.spacing();
    if h > 1.0 {
        return Err(FdmError::StepTooLarge(h));
    }
    if grid.dim() != spec.dim {
        return Err(FdmError::DimMismatch {
            grid: grid.dim(),
            problem: spec.dim,
        });
    }
    let n = spec.dim;
    let x = grid.point_of_flat(node);
    let a = spec.coefficients.eval_a(control, &x);
    let b = spec.coefficients.eval_b(control, &x);
    let c = spec.coefficients.eval_c(control, &x);

    let mut offsets = Vec::new();
    let mut p = Vec::new();
    let row_defect: f64 = (0..n)
        .map(|i| {
            let off: f64 = (0..n)
                .filter(|&j| j != i)
                .map(|j| a[i * n + j].abs() / 2.0)
                .sum();
            a[i * n + i] - off + h * b[i].abs()
        })
        .sum();
    offsets.push(vec![0i64; n]);
    p.push(1.0 - row_defect);
    for i in 0..n {
        let off: f64 = (0..n)
            .filter(|&j| j != i)
            .map(|j| a[i * n + j].abs() / 2.0)
            .sum();
        let diag = a[i * n + i] / 2.0 - off;
        let bp = b[i].max(0.0);
        let bm = (-b[i]).max(0.0);
        let mut e = vec![0i64; n];
        e[i] = 1;
        offsets.push(e.clone());
        p.push(diag + h * bp);
        e[i] = -1;
        offsets.push(e);
        p.push(diag + h * bm);
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let aij = a[i * n + j];
            if aij == 0.0 {
                continue;
            }
            let ap = aij.max(0.0) / 2.0;
            let am = (-aij).max(0.0) / 2.0;
            // (+,+) and (-,-) carry a^+/2; (+,-) and (-,+) carry a^-/2.
            for (di, dj, w) in [(1, 1, ap), (-1, -1, ap), (1, -1, am), (-1, 1, am)] {
                let mut e = vec![0i64; n];
                e[i] = di;
                e[j] = dj;
                offsets.push(e);
                p.push(w);
            }
        }
    }
    for (k, &w) in p.iter().enumerate() {
        if w < -1e-12 {
            return Err(FdmError::NegativeWeight {
                node,
                control,
                offset: offsets[k].clone(),
                value: w,
            });
        }
    }
    Ok(SchemeWeights { offsets, p, c })
}

/// Combine per-control residuals according to the optimization sense:
/// `max` over one control set, or `min` over the outer axis of `max` over
/// the inner one.
pub fn combine_residuals(sense: Sense, shape: (usize, usize), s: &[f64]) -> f64 {
    let (na, nb) = shape;
    debug_assert_eq!(s.len(), na * nb);
    match sense {
        Sense::SupOverControls => s.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)),
        Sense::InfSup => (0..na)
            .map(|alpha| {
                (0..nb)
                    .map(|beta| s[alpha * nb + beta])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .fold(f64::INFINITY, f64::min),
    }
}

/// Combine per-control scalar roots into the root of the combined
/// residual: each per-control residual is increasing in `r`, so the
/// `max`-residual vanishes at the smallest root and `min_a max_b` at
/// `max_a min_b` of the roots.
pub fn combine_roots(sense: Sense, shape: (usize, usize), roots: &[f64]) -> f64 {
    let (na, nb) = shape;
    debug_assert_eq!(roots.len(), na * nb);
    match sense {
        Sense::SupOverControls => roots.iter().fold(f64::INFINITY, |m, &v| m.min(v)),
        Sense::InfSup => (0..na)
            .map(|alpha| {
                (0..nb)
                    .map(|beta| roots[alpha * nb + beta])
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Per-control weight storage: one shared row when the weights do not
/// depend on the node (constant `a` and `b`), one row per node otherwise.
enum WeightRows {
    Uniform(Vec<f64>),
    PerNode(Vec<f64>),
}

/// Assembled FDM operator on a fixed grid: stencil offsets, resolved
/// neighbor indices, per-control weights and zero-order data. All state
/// is immutable after construction; evaluation methods are pure.
pub struct FdmOperator {
    grid: Arc<Grid>,
    spec: ProblemSpec,
    n_offsets: usize,
    offsets: Vec<Vec<i64>>,
    /// nodes x n_offsets flat neighbor indices (center included).
    neighbors: Vec<usize>,
    weights: Vec<WeightRows>,
    /// per control: c at every node.
    c: Vec<Vec<f64>>,
    /// per control: f(x, 0) at every node.
    f0: Vec<Vec<f64>>,
    uses_r: Vec<bool>,
    points: Vec<Vec<f64>>,
}

impl FdmOperator {
    pub fn new(spec: &ProblemSpec, grid: Arc<Grid>) -> Result<FdmOperator, FdmError> {
        let n = spec.dim;
        let controls = spec.coefficients.controls();
        // Global stencil: center, axis pairs, and the diagonals of every
        // pair with a nonzero cross term under any control.
        let template = assemble_weights(spec, &grid, 0, 0)?;
        let mut offsets = template.offsets.clone();
        for ctrl in 1..controls {
            let w = assemble_weights(spec, &grid, 0, ctrl)?;
            for o in w.offsets {
                if !offsets.contains(&o) {
                    offsets.push(o);
                }
            }
        }
        let n_offsets = offsets.len();

        let mut neighbors = Vec::with_capacity(grid.node_count() * n_offsets);
        for node in grid.iter_nodes() {
            let idx = grid.multi_index(node);
            for off in &offsets {
                let mut flat = 0;
                for axis in 0..n {
                    let i = idx[axis] as i64 + off[axis];
                    flat = flat * grid.nodes_per_axis()[axis]
                        + grid.resolve_axis_index(axis, i);
                }
                neighbors.push(flat);
            }
        }

        let points: Vec<Vec<f64>> = grid
            .iter_nodes()
            .map(|node| grid.point_of_flat(node))
            .collect();
        let mut weights = Vec::with_capacity(controls);
        let mut c_all = Vec::with_capacity(controls);
        let mut f0_all = Vec::with_capacity(controls);
        let mut uses_r = Vec::with_capacity(controls);
        for ctrl in 0..controls {
            let constant_row = spec.coefficients.b_exprs(ctrl).iter().all(|e| {
                e.max_var().is_none()
            }) && spec.coefficients.sigma_exprs(ctrl).iter().all(|e| {
                e.max_var().is_none()
            });
            let align = |w: &SchemeWeights| -> Vec<f64> {
                offsets
                    .iter()
                    .map(|o| {
                        w.offsets
                            .iter()
                            .position(|wo| wo == o)
                            .map_or(0.0, |k| w.p[k])
                    })
                    .collect()
            };
            let rows = if constant_row {
                WeightRows::Uniform(align(&assemble_weights(spec, &grid, 0, ctrl)?))
            } else {
                let mut all = Vec::with_capacity(grid.node_count() * n_offsets);
                for node in grid.iter_nodes() {
                    all.extend(align(&assemble_weights(spec, &grid, node, ctrl)?));
                }
                WeightRows::PerNode(all)
            };
            weights.push(rows);
            c_all.push(
                points
                    .iter()
                    .map(|x| spec.coefficients.eval_c(ctrl, x))
                    .collect(),
            );
            f0_all.push(
                points
                    .iter()
                    .map(|x| spec.coefficients.eval_f(ctrl, x, 0.0))
                    .collect(),
            );
            uses_r.push(spec.coefficients.f_uses_r(ctrl));
        }
        Ok(FdmOperator {
            grid,
            spec: spec.clone(),
            n_offsets,
            offsets,
            neighbors,
            weights,
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

    pub fn offsets(&self) -> &[Vec<i64>] {
        &self.offsets
    }

    pub fn controls(&self) -> usize {
        self.c.len()
    }

    /// Weight row for (node, control) in the global offset order.
    pub fn weight_row(&self, node: usize, control: usize) -> &[f64] {
        match &self.weights[control] {
            WeightRows::Uniform(row) => row,
            WeightRows::PerNode(all) => {
                &all[node * self.n_offsets..(node + 1) * self.n_offsets]
            }
        }
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

    /// Weighted neighbor sum `sum_{z != 0} p(x, x+z) u(x+z)` plus the
    /// center weight, returned as (neighbor_sum, p_center).
    pub fn neighbor_sum(&self, values: &[f64], node: usize, control: usize) -> (f64, f64) {
        let row = self.weight_row(node, control);
        let nbr = &self.neighbors[node * self.n_offsets..(node + 1) * self.n_offsets];
        let mut acc = 0.0;
        for k in 1..self.n_offsets {
            acc += row[k] * values[nbr[k]];
        }
        (acc, row[0])
    }

    /// Residual of one control at (node, r).
    pub fn control_residual(&self, values: &[f64], node: usize, control: usize, r: f64) -> f64 {
        let h = self.grid.spacing();
        let (acc, p0) = self.neighbor_sum(values, node, control);
        -(acc + p0 * r - r) / (h * h) + self.c_at(node, control) * r + self.f_at(node, control, r)
    }

    /// The scheme residual S(h, x, r, [u]_x) in weight form, combined
    /// over controls per the problem sense.
    pub fn apply(&self, values: &[f64], node: usize, r: f64) -> f64 {
        let shape = self.spec.controls.shape();
        let s: Vec<f64> = (0..self.controls())
            .map(|ctrl| self.control_residual(values, node, ctrl, r))
            .collect();
        combine_residuals(self.spec.sense, shape, &s)
    }

    /// One application of the literal fixed-point map: the value-form
    /// update `(sum_z p u(x+z) - h^2 f(x, u(x))) / (1 + h^2 c)`, combined
    /// as `min` over one control set (or `max_a min_b`), which is the
    /// value-side counterpart of the residual combination.
    pub fn t_h_value(&self, values: &[f64], node: usize) -> f64 {
        let h = self.grid.spacing();
        let h2 = h * h;
        let r_old = values[node];
        let (na, nb) = self.spec.controls.shape();
        let v: Vec<f64> = (0..self.controls())
            .map(|ctrl| {
                let (acc, p0) = self.neighbor_sum(values, node, ctrl);
                (acc + p0 * r_old - h2 * self.f_at(node, ctrl, r_old))
                    / (1.0 + h2 * self.c_at(node, ctrl))
            })
            .collect();
        combine_roots(self.spec.sense, (na, nb), &v)
    }

    /// Apply the literal fixed-point map to a whole field.
    pub fn t_h_apply(&self, u: &GridFunction) -> GridFunction {
        let values = u.values();
        let out: Vec<f64> = self
            .grid
            .iter_nodes()
            .map(|node| self.t_h_value(values, node))
            .collect();
        GridFunction::new(self.grid.clone(), out).expect("T_h preserves finiteness")
    }
}

/// Stencil-form residual built directly from the difference operators;
/// algebraically equal to the weight form, implemented independently for
/// cross-checking. The center value of every difference operator is `r`.
pub fn stencil_apply(
    spec: &ProblemSpec,
    u: &GridFunction,
    node: &[i64],
    r: f64,
) -> f64 {
    let grid = u.grid();
    let h = grid.spacing();
    let n = spec.dim;
    let idx_us: Vec<usize> = node
        .iter()
        .enumerate()
        .map(|(axis, &i)| grid.resolve_axis_index(axis, i))
        .collect();
    let x = grid.point(&idx_us);
    let at = |delta: &[i64]| -> f64 {
        if delta.iter().all(|&d| d == 0) {
            return r;
        }
        let idx: Vec<i64> = node.iter().zip(delta).map(|(&i, &d)| i + d).collect();
        u.lookup(&idx)
    };
    let d_plus = |i: usize| {
        let mut e = vec![0i64; n];
        e[i] = 1;
        (at(&e) - r) / h
    };
    let d_minus = |i: usize| {
        let mut e = vec![0i64; n];
        e[i] = -1;
        -(at(&e) - r) / h
    };
    let d2 = |i: usize| {
        let mut up = vec![0i64; n];
        let mut dn = vec![0i64; n];
        up[i] = 1;
        dn[i] = -1;
        (at(&up) - 2.0 * r + at(&dn)) / (h * h)
    };
    let dcross = |i: usize, j: usize, sign: Sign| {
        let mk = |di: i64, dj: i64| {
            let mut e = vec![0i64; n];
            e[i] = di;
            e[j] = dj;
            at(&e)
        };
        let axis_sum = mk(1, 0) + mk(-1, 0) + mk(0, 1) + mk(0, -1);
        match sign {
            Sign::Plus => (2.0 * r + mk(1, 1) + mk(-1, -1) - axis_sum) / (2.0 * h * h),
            Sign::Minus => (axis_sum - 2.0 * r - mk(1, -1) - mk(-1, 1)) / (2.0 * h * h),
        }
    };

    let shape = spec.controls.shape();
    let s: Vec<f64> = (0..spec.coefficients.controls())
        .map(|ctrl| {
            let a = spec.coefficients.eval_a(ctrl, &x);
            let b = spec.coefficients.eval_b(ctrl, &x);
            let c = spec.coefficients.eval_c(ctrl, &x);
            let mut acc = 0.0;
            for i in 0..n {
                acc -= a[i * n + i] / 2.0 * d2(i);
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let aij = a[i * n + j];
                    acc -= aij.max(0.0) / 2.0 * dcross(i, j, Sign::Plus);
                    acc += (-aij).max(0.0) / 2.0 * dcross(i, j, Sign::Minus);
                }
                acc -= b[i].max(0.0) * d_plus(i);
                acc += (-b[i]).max(0.0) * d_minus(i);
            }
            acc + c * r + spec.coefficients.eval_f(ctrl, &x, r)
        })
        .collect();
    combine_residuals(spec.sense, shape, &s)
}

/// A smooth test function with its exact first two derivatives and
/// declared sup-norms of derivatives up to fourth order, used by the
/// consistency testers.
pub struct SmoothTestFunction<'a> {
    pub phi: &'a dyn Fn(&[f64]) -> f64,
    pub grad: &'a dyn Fn(&[f64]) -> Vec<f64>,
    pub hess: &'a dyn Fn(&[f64]) -> Vec<f64>,
    pub d2: f64,
    pub d3: f64,
    pub d4: f64,
}

/// Continuous residual F(x, r, Dphi, D2phi) combined over controls.
pub fn continuous_residual(spec: &ProblemSpec, x: &[f64], r: f64, grad: &[f64], hess: &[f64]) -> f64 {
    let n = spec.dim;
    let shape = spec.controls.shape();
    let s: Vec<f64> = (0..spec.coefficients.controls())
        .map(|ctrl| {
            let a = spec.coefficients.eval_a(ctrl, x);
            let b = spec.coefficients.eval_b(ctrl, x);
            let c = spec.coefficients.eval_c(ctrl, x);
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    acc -= 0.5 * a[i * n + j] * hess[i * n + j];
                }
                acc -= b[i] * grad[i];
            }
            acc + c * r + spec.coefficients.eval_f(ctrl, x, r)
        })
        .collect();
    combine_residuals(spec.sense, shape, &s)
}

/// Consistency orders and constants: |F - S| <= sum_i K_i |D^i phi| h^{k_i},
/// with the derived exponent gamma = min over contributing i of k_i / i.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyModel {
    /// (derivative order i, power k_i, constant K_i).
    pub terms: Vec<(u32, u32, f64)>,
}

impl ConsistencyModel {
    pub fn gamma(&self) -> f64 {
        self.terms
            .iter()
            .filter(|&&(_, _, k)| k > 0.0)
            .map(|&(i, ki, _)| ki as f64 / i as f64)
            .fold(f64::INFINITY, f64::min)
    }
}

/// The FDM consistency model: K(|D^2 phi| h + |D^4 phi| h^2), gamma = 1/2.
pub fn fdm_consistency_model(k_bar: f64) -> ConsistencyModel {
    ConsistencyModel {
        terms: vec![(2, 1, k_bar), (4, 2, k_bar)],
    }
}

/// Measure the consistency error sup_x |F(phi) - S(phi)| over grid nodes
/// (neighbors evaluated analytically, so no boundary effects) and the
/// bound `K(|D^2 phi| h + |D^4 phi| h^2)`.
///
/// The drift part of `K` uses `sum_i |b_i|` rather than the tight
/// `sum_i |b_i| / 2`; the slack absorbs the third-derivative remainder of
/// the one-sided differences for h <= 1/4.
pub fn consistency_error(
    spec: &ProblemSpec,
    grid: &Grid,
    test: &SmoothTestFunction,
) -> (f64, f64) {
    let n = spec.dim;
    let h = grid.spacing();
    let shape = spec.controls.shape();
    let mut measured: f64 = 0.0;
    let mut k_drift: f64 = 0.0;
    let mut k_diff: f64 = 0.0;
    for node in grid.iter_nodes() {
        let x = grid.point_of_flat(node);
        let r = (test.phi)(&x);
        let grad = (test.grad)(&x);
        let hess = (test.hess)(&x);
        let f_cont = continuous_residual(spec, &x, r, &grad, &hess);

        let phi_at = |delta: &[i64]| -> f64 {
            let y: Vec<f64> = x
                .iter()
                .zip(delta)
                .map(|(&xi, &d)| xi + d as f64 * h)
                .collect();
            (test.phi)(&y)
        };
        let s: Vec<f64> = (0..spec.coefficients.controls())
            .map(|ctrl| {
                let a = spec.coefficients.eval_a(ctrl, &x);
                let b = spec.coefficients.eval_b(ctrl, &x);
                let c = spec.coefficients.eval_c(ctrl, &x);
                let mut drift: f64 = 0.0;
                let mut diff: f64 = 0.0;
                let mut acc = 0.0;
                for i in 0..n {
                    let mut up = vec![0i64; n];
                    let mut dn = vec![0i64; n];
                    up[i] = 1;
                    dn[i] = -1;
                    acc -= a[i * n + i] / 2.0
                        * ((phi_at(&up) - 2.0 * r + phi_at(&dn)) / (h * h));
                    diff += a[i * n + i].abs() / 24.0;
                    for j in 0..n {
                        if j == i {
                            continue;
                        }
                        let aij = a[i * n + j];
                        if aij != 0.0 {
                            let mk = |di: i64, dj: i64| {
                                let mut e = vec![0i64; n];
                                e[i] = di;
                                e[j] = dj;
                                phi_at(&e)
                            };
                            let axis_sum = mk(1, 0) + mk(-1, 0) + mk(0, 1) + mk(0, -1);
                            let plus = (2.0 * r + mk(1, 1) + mk(-1, -1) - axis_sum)
                                / (2.0 * h * h);
                            let minus = (axis_sum - 2.0 * r - mk(1, -1) - mk(-1, 1))
                                / (2.0 * h * h);
                            acc -= aij.max(0.0) / 2.0 * plus;
                            acc += (-aij).max(0.0) / 2.0 * minus;
                            diff += aij.abs() / 8.0;
                        }
                    }
                    acc -= b[i].max(0.0) * ((phi_at(&up) - r) / h);
                    acc += (-b[i]).max(0.0) * (-(phi_at(&dn) - r) / h);
                    drift += b[i].abs();
                }
                k_drift = k_drift.max(drift);
                k_diff = k_diff.max(diff);
                acc + c * r + spec.coefficients.eval_f(ctrl, &x, r)
            })
            .collect();
        let s_val = combine_residuals(spec.sense, shape, &s);
        measured = measured.max((f_cont - s_val).abs());
    }
    let k_bar = k_drift.max(k_diff);
    let bound = k_bar * (test.d2 * h + test.d4 * h * h);
    (measured, bound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_expression, Expression};
    use crate::grid::{eval_on_grid, BoundaryPolicy};
    use crate::problem::{ControlGrid, CoefficientSet, LipschitzConstants};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid1d(n: usize) -> Arc<Grid> {
        Arc::new(Grid::new(&[(0.0, 1.0)], 1.0 / (n - 1) as f64, BoundaryPolicy::Clamp).unwrap())
    }

    fn spec_1d(a: f64, b: f64, c: f64, f_src: &str) -> ProblemSpec {
        ProblemSpec::new(
            1,
            vec![(0.0, 1.0)],
            ControlGrid::new(1).unwrap(),
            CoefficientSet::new(
                1,
                1,
                1,
                vec![vec![Expression::constant((2.0 * a).sqrt())]],
                vec![vec![Expression::constant(b)]],
                vec![Expression::constant(c)],
                vec![parse_expression(f_src).unwrap()],
                c.max(0.1),
                c.max(0.1),
                vec![LipschitzConstants::zero()],
            )
            .unwrap(),
            None,
            Sense::SupOverControls,
        )
        .unwrap()
    }

    #[test]
    fn difference_operators_on_polynomials() {
        let g = grid1d(11);
        let u = eval_on_grid(|x| x[0] * x[0], &g).unwrap();
        // Second difference is exact on quadratics at interior nodes.
        assert!((delta2(&u, &[5], 0) - 2.0).abs() < 1e-10);
        let lin = eval_on_grid(|x| x[0], &g).unwrap();
        assert!((delta_pm(&lin, &[4], 0, Sign::Plus) - 1.0).abs() < 1e-12);
        let konst = eval_on_grid(|_| 3.0, &g).unwrap();
        assert_eq!(delta_pm(&konst, &[4], 0, Sign::Plus), 0.0);
    }

    #[test]
    fn cross_differences_on_bilinear() {
        let g = Arc::new(
            Grid::new(&[(0.0, 1.0), (0.0, 1.0)], 0.1, BoundaryPolicy::Clamp).unwrap(),
        );
        let u = eval_on_grid(|x| x[0] * x[1], &g).unwrap();
        // Both cross stencils reproduce the mixed derivative of x1*x2
        // exactly (value +1).
        assert!((delta_cross_pm(&u, &[5, 5], 0, 1, Sign::Plus) - 1.0).abs() < 1e-9);
        assert!((delta_cross_pm(&u, &[5, 5], 0, 1, Sign::Minus) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn weights_1d_unit_diffusion() {
        // N=1, a=1, b=0: center 0, axis 1/2 each.
        let spec = spec_1d(0.5, 0.0, 1.0, "0");
        let g = grid1d(11);
        let w = assemble_weights(&spec, &g, 5, 0).unwrap();
        assert!((w.p[0] - 0.0).abs() < 1e-12);
        assert!((w.p[1] - 0.5).abs() < 1e-12);
        assert!((w.p[2] - 0.5).abs() < 1e-12);
        assert!((w.row_sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weights_1d_with_drift() {
        // N=1, a=1/2, b=1, h=0.1: center 0.4, +h 0.35, -h 0.25.
        let spec = spec_1d(0.25, 1.0, 1.0, "0");
        let g = grid1d(11);
        let w = assemble_weights(&spec, &g, 5, 0).unwrap();
        assert!((w.p[0] - 0.4).abs() < 1e-12);
        assert!((w.p[1] - 0.35).abs() < 1e-12);
        assert!((w.p[2] - 0.25).abs() < 1e-12);
        assert!((w.row_sum() - 1.0).abs() < 1e-12);
    }

    fn spec_2d_cross() -> ProblemSpec {
        // a11 = a22 = 1/2, a12 = 1/4 via Cholesky columns.
        let l11 = 0.5f64.sqrt();
        let l21 = 0.25 / l11;
        let l22 = (0.5 - l21 * l21).sqrt();
        ProblemSpec::new(
            2,
            vec![(0.0, 1.0), (0.0, 1.0)],
            ControlGrid::new(1).unwrap(),
            CoefficientSet::new(
                2,
                2,
                1,
                vec![vec![
                    Expression::constant(l11),
                    Expression::constant(0.0),
                    Expression::constant(l21),
                    Expression::constant(l22),
                ]],
                vec![vec![Expression::constant(0.0), Expression::constant(0.0)]],
                vec![Expression::constant(1.0)],
                vec![Expression::constant(0.0)],
                1.0,
                1.0,
                vec![LipschitzConstants::zero()],
            )
            .unwrap(),
            None,
            Sense::SupOverControls,
        )
        .unwrap()
    }

    #[test]
    fn weights_2d_cross_derivative() {
        // Center 1/4, four axis weights 1/8, two diagonals (+,+)/(-,-) 1/8,
        // row sum 1.
        let spec = spec_2d_cross();
        let g = Arc::new(
            Grid::new(&[(0.0, 1.0), (0.0, 1.0)], 0.125, BoundaryPolicy::Periodic).unwrap(),
        );
        let w = assemble_weights(&spec, &g, 0, 0).unwrap();
        assert!((w.p[0] - 0.25).abs() < 1e-12);
        for k in 1..=4 {
            assert!((w.p[k] - 0.125).abs() < 1e-12, "axis weight {k}");
        }
        let find = |di: i64, dj: i64| {
            let pos = w.offsets.iter().position(|o| o == &vec![di, dj]).unwrap();
            w.p[pos]
        };
        assert!((find(1, 1) - 0.125).abs() < 1e-12);
        assert!((find(-1, -1) - 0.125).abs() < 1e-12);
        assert!((find(1, -1) - 0.0).abs() < 1e-12);
        assert!((find(-1, 1) - 0.0).abs() < 1e-12);
        assert!((w.row_sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_large_h_and_negative_weights() {
        let spec = spec_1d(0.5, 0.0, 1.0, "0");
        let g = Arc::new(Grid::new(&[(0.0, 10.0)], 2.0, BoundaryPolicy::Clamp).unwrap());
        assert_eq!(
            assemble_weights(&spec, &g, 0, 0).unwrap_err(),
            FdmError::StepTooLarge(2.0)
        );
        // a11 = a22 = 1, a12 = 0.9 gives a negative center weight even
        // though diagonal dominance holds.
        let l11 = 1.0f64;
        let l21 = 0.9;
        let l22 = (1.0 - 0.81f64).sqrt();
        let bad = ProblemSpec::new(
            2,
            vec![(0.0, 1.0), (0.0, 1.0)],
            ControlGrid::new(1).unwrap(),
            CoefficientSet::new(
                2,
                2,
                1,
                vec![vec![
                    Expression::constant(l11),
                    Expression::constant(0.0),
                    Expression::constant(l21),
                    Expression::constant(l22),
                ]],
                vec![vec![Expression::constant(0.0), Expression::constant(0.0)]],
                vec![Expression::constant(1.0)],
                vec![Expression::constant(0.0)],
                1.0,
                1.0,
                vec![LipschitzConstants::zero()],
            )
            .unwrap(),
            None,
            Sense::SupOverControls,
        )
        .unwrap();
        let g2 = Arc::new(
            Grid::new(&[(0.0, 1.0), (0.0, 1.0)], 0.25, BoundaryPolicy::Periodic).unwrap(),
        );
        assert!(matches!(
            assemble_weights(&bad, &g2, 0, 0),
            Err(FdmError::NegativeWeight { .. })
        ));
    }

    #[test]
    fn zero_diffusion_residual() {
        // a=b=0, c=1, source 2 (stored as f = -2), r=2: S = 1*2 - 2 = 0.
        let spec = spec_1d(0.0, 0.0, 1.0, "0 - 2");
        let g = grid1d(11);
        let op = FdmOperator::new(&spec, g.clone()).unwrap();
        let u = vec![7.0; g.node_count()];
        assert!((op.apply(&u, 5, 2.0)).abs() < 1e-12);
    }

    #[test]
    fn constants_are_harmonic() {
        // u constant K, r = K: S = c K + f(x).
        let spec = spec_1d(0.25, 0.7, 2.0, "0 - 1");
        let g = grid1d(21);
        let op = FdmOperator::new(&spec, g.clone()).unwrap();
        let u = vec![3.0; g.node_count()];
        assert!((op.apply(&u, 10, 3.0) - (2.0 * 3.0 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn weight_and_stencil_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = spec_1d(0.3, 0.4, 1.5, "0 - 1");
        let g = Arc::new(Grid::new(&[(0.0, 1.0)], 1.0 / 32.0, BoundaryPolicy::Periodic).unwrap());
        let op = FdmOperator::new(&spec, g.clone()).unwrap();
        let u = eval_on_grid(
            |x| (2.0 * std::f64::consts::PI * x[0]).sin() + 0.3 * x[0],
            &g,
        )
        .unwrap();
        for _ in 0..50 {
            let node = rng.gen_range(0..g.node_count());
            let r = rng.gen_range(-1.0..1.0);
            let w = op.apply(u.values(), node, r);
            let s = stencil_apply(&spec, &u, &[node as i64], r);
            assert!((w - s).abs() < 1e-12, "node {node}: {w} vs {s}");
        }
        // 2D with cross terms.
        let spec2 = spec_2d_cross();
        let g2 = Arc::new(
            Grid::new(&[(0.0, 1.0), (0.0, 1.0)], 1.0 / 16.0, BoundaryPolicy::Periodic)
                .unwrap(),
        );
        let op2 = FdmOperator::new(&spec2, g2.clone()).unwrap();
        let u2 = eval_on_grid(
            |x| {
                (2.0 * std::f64::consts::PI * x[0]).sin()
                    * (2.0 * std::f64::consts::PI * x[1]).cos()
            },
            &g2,
        )
        .unwrap();
        for _ in 0..50 {
            let node = rng.gen_range(0..g2.node_count());
            let idx = g2.multi_index(node);
            let idx_i: Vec<i64> = idx.iter().map(|&i| i as i64).collect();
            let r = rng.gen_range(-1.0..1.0);
            let w = op2.apply(u2.values(), node, r);
            let s = stencil_apply(&spec2, &u2, &idx_i, r);
            assert!((w - s).abs() < 1e-12, "node {node}: {w} vs {s}");
        }
    }

    #[test]
    fn monotone_in_field_and_shift_in_r() {
        let spec = spec_1d(0.3, 0.4, 1.5, "0 - 1");
        let g = Arc::new(Grid::new(&[(0.0, 1.0)], 1.0 / 32.0, BoundaryPolicy::Periodic).unwrap());
        let op = FdmOperator::new(&spec, g.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let u: Vec<f64> = (0..g.node_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bump: Vec<f64> = (0..g.node_count()).map(|_| rng.gen_range(0.0..1.0)).collect();
            let v: Vec<f64> = u.iter().zip(&bump).map(|(a, b)| a + b).collect();
            let node = rng.gen_range(0..g.node_count());
            let r = rng.gen_range(-1.0..1.0);
            // u <= v pointwise: S(u) >= S(v).
            assert!(op.apply(&u, node, r) >= op.apply(&v, node, r) - 1e-12);
            // (S1) shift: S(r + m, u + m) >= lambda m + S(r, u) for m >= 0.
            let m = rng.gen_range(0.0..1.0);
            let um: Vec<f64> = u.iter().map(|a| a + m).collect();
            let lambda = spec.coefficients.lambda_lo;
            assert!(
                op.apply(&um, node, r + m) >= lambda * m + op.apply(&u, node, r) - 1e-12
            );
        }
    }

    #[test]
    fn consistency_on_quadratic() {
        // b = 0: second differences are exact on quadratics.
        let spec = spec_1d(0.4, 0.0, 1.0, "0");
        let g = Arc::new(Grid::new(&[(0.0, 1.0)], 1.0 / 16.0, BoundaryPolicy::Clamp).unwrap());
        let phi = |x: &[f64]| x[0] * x[0];
        let grad = |x: &[f64]| vec![2.0 * x[0]];
        let hess = |_: &[f64]| vec![2.0];
        let test = SmoothTestFunction {
            phi: &phi,
            grad: &grad,
            hess: &hess,
            d2: 2.0,
            d3: 0.0,
            d4: 0.0,
        };
        let (measured, _) = consistency_error(&spec, &g, &test);
        assert!(measured < 1e-10, "measured {measured}");

        // b != 0: first-order error bounded by |b| |D^2 phi| h.
        let spec_b = spec_1d(0.4, 0.5, 1.0, "0");
        let (measured_b, bound_b) = consistency_error(&spec_b, &g, &test);
        assert!(measured_b <= 0.5 * 2.0 * g.spacing() + 1e-12);
        assert!(measured_b <= bound_b);
        assert!(measured_b > 1e-4, "drift error should be visible");
    }

    #[test]
    fn consistency_first_order_on_sine() {
        let spec = spec_1d(0.3, 0.4, 1.5, "0");
        let tau = 2.0 * std::f64::consts::PI;
        let phi = move |x: &[f64]| (tau * x[0]).sin();
        let grad = move |x: &[f64]| vec![tau * (tau * x[0]).cos()];
        let hess = move |x: &[f64]| vec![-tau * tau * (tau * x[0]).sin()];
        let mut errs = Vec::new();
        for k in [64usize, 128, 256] {
            let g = Arc::new(
                Grid::new(&[(0.0, 1.0)], 1.0 / k as f64, BoundaryPolicy::Periodic).unwrap(),
            );
            let test = SmoothTestFunction {
                phi: &phi,
                grad: &grad,
                hess: &hess,
                d2: tau * tau,
                d3: tau * tau * tau,
                d4: tau * tau * tau * tau,
            };
            let (measured, bound) = consistency_error(&spec, &g, &test);
            assert!(measured <= bound, "h=1/{k}: {measured} > {bound}");
            errs.push(measured);
        }
        // Halving h halves the error within 20%.
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((ratio - 2.0).abs() < 0.4, "ratio {ratio}");
        }
    }

    #[test]
    fn consistency_model_gamma() {
        let m = fdm_consistency_model(1.0);
        assert!((m.gamma() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn combine_respects_sense() {
        // InfSup over a 2x2 table of residuals.
        let s = [3.0, 1.0, 2.0, -1.0];
        assert_eq!(combine_residuals(Sense::SupOverControls, (4, 1), &s), 3.0);
        // min over alpha of max over beta: min(max(3,1), max(2,-1)) = 2.
        assert_eq!(combine_residuals(Sense::InfSup, (2, 2), &s), 2.0);
        // Roots combine dually: max over alpha of min over beta.
        assert_eq!(combine_roots(Sense::SupOverControls, (4, 1), &s), -1.0);
        assert_eq!(combine_roots(Sense::InfSup, (2, 2), &s), 1.0);
    }
}
