//! Uniform tensor grids on truncated boxes, grid functions, and discrete
//! norm/seminorm estimators.
//!
//! The continuous problems live on all of space; computations happen on a
//! box snapped to an isotropic spacing `h`, with a boundary policy deciding
//! how stencils that leave the box read their neighbors. `Periodic` wraps
//! indices modulo `nodes - 1` per axis (node `n-1` aliases node 0), `Clamp`
//! projects them into range.

use std::fmt::Write as _;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("axis {axis}: need at least 3 nodes, got {nodes}")]
    TooFewNodes { axis: usize, nodes: usize },
    #[error("spacing must be positive, got {0}")]
    BadSpacing(f64),
    #[error("axis {axis}: box [{lo}, {hi}] is empty or inverted")]
    EmptyBox { axis: usize, lo: f64, hi: f64 },
    #[error("non-finite value at node {node}")]
    NonFinite { node: usize },
    #[error("grid mismatch between operands")]
    GridMismatch,
    #[error("value count {got} does not match node count {expected}")]
    ValueCount { got: usize, expected: usize },
    #[error("malformed field dump: {0}")]
    BadDump(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryPolicy {
    Periodic,
    Clamp,
}

/// Uniform grid with the same spacing on every axis. The box is snapped so
/// that `hi - lo = h * (nodes - 1)` holds exactly per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dim: usize,
    h: f64,
    nodes: Vec<usize>,
    lo: Vec<f64>,
    policy: BoundaryPolicy,
}

impl Grid {
    /// Build a grid from per-axis bounds and a target spacing. The upper
    /// bound of each axis is snapped to the nearest multiple of `h`.
    pub fn new(
        bounds: &[(f64, f64)],
        h: f64,
        policy: BoundaryPolicy,
    ) -> Result<Grid, GridError> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(GridError::BadSpacing(h));
        }
        let mut nodes = Vec::with_capacity(bounds.len());
        let mut lo = Vec::with_capacity(bounds.len());
        for (axis, &(a, b)) in bounds.iter().enumerate() {
            if !(b > a) {
                return Err(GridError::EmptyBox {
                    axis,
                    lo: a,
                    hi: b,
                });
            }
            let steps = ((b - a) / h).round().max(1.0) as usize;
            let n = steps + 1;
            if n < 3 {
                return Err(GridError::TooFewNodes { axis, nodes: n });
            }
            nodes.push(n);
            lo.push(a);
        }
        Ok(Grid {
            dim: bounds.len(),
            h,
            nodes,
            lo,
            policy,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    pub fn nodes_per_axis(&self) -> &[usize] {
        &self.nodes
    }

    pub fn policy(&self) -> BoundaryPolicy {
        self.policy
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.lo
            .iter()
            .zip(&self.nodes)
            .map(|(&a, &n)| (a, a + self.h * (n - 1) as f64))
            .collect()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.iter().product()
    }

    /// Row-major flat index of an in-range multi-index.
    pub fn flat_index(&self, idx: &[usize]) -> usize {
        let mut flat = 0;
        for (axis, &i) in idx.iter().enumerate() {
            debug_assert!(i < self.nodes[axis]);
            flat = flat * self.nodes[axis] + i;
        }
        flat
    }

    /// Multi-index of a row-major flat index.
    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0usize; self.dim];
        for axis in (0..self.dim).rev() {
            idx[axis] = flat % self.nodes[axis];
            flat /= self.nodes[axis];
        }
        idx
    }

    /// Coordinates of the node with the given multi-index.
    pub fn point(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter()
            .enumerate()
            .map(|(axis, &i)| self.lo[axis] + self.h * i as f64)
            .collect()
    }

    pub fn point_of_flat(&self, flat: usize) -> Vec<f64> {
        self.point(&self.multi_index(flat))
    }

    /// Map a possibly out-of-range signed index on `axis` into range
    /// according to the boundary policy.
    pub fn resolve_axis_index(&self, axis: usize, i: i64) -> usize {
        let n = self.nodes[axis] as i64;
        if (0..n).contains(&i) {
            return i as usize;
        }
        match self.policy {
            BoundaryPolicy::Periodic => {
                let period = n - 1;
                i.rem_euclid(period) as usize
            }
            BoundaryPolicy::Clamp => i.clamp(0, n - 1) as usize,
        }
    }

    pub fn iter_nodes(&self) -> impl Iterator<Item = usize> {
        0..self.node_count()
    }
}

/// One real value per grid node, immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<GridFunction, GridError> {
        if values.len() != grid.node_count() {
            return Err(GridError::ValueCount {
                got: values.len(),
                expected: grid.node_count(),
            });
        }
        if let Some(node) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite { node });
        }
        Ok(GridFunction { grid, values })
    }

    pub fn constant(grid: Arc<Grid>, value: f64) -> GridFunction {
        let n = grid.node_count();
        GridFunction {
            grid,
            values: vec![value; n],
        }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, flat: usize) -> f64 {
        self.values[flat]
    }

    /// Value at a possibly out-of-range multi-index, resolved through the
    /// grid's boundary policy.
    pub fn lookup(&self, idx: &[i64]) -> f64 {
        let mut flat = 0;
        for (axis, &i) in idx.iter().enumerate() {
            let j = self.grid.resolve_axis_index(axis, i);
            flat = flat * self.grid.nodes[axis] + j;
        }
        self.values[flat]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GridFunction {
        GridFunction {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Pointwise evaluation of a scalar function at every node.
pub fn eval_on_grid<F>(f: F, grid: &Arc<Grid>) -> Result<GridFunction, GridError>
where
    F: Fn(&[f64]) -> f64,
{
    let mut values = Vec::with_capacity(grid.node_count());
    for flat in grid.iter_nodes() {
        let x = grid.point_of_flat(flat);
        let v = f(&x);
        if !v.is_finite() {
            return Err(GridError::NonFinite { node: flat });
        }
        values.push(v);
    }
    Ok(GridFunction {
        grid: grid.clone(),
        values,
    })
}

pub fn sup_norm(u: &GridFunction) -> f64 {
    u.values.iter().fold(0.0, |m, &v| m.max(v.abs()))
}

pub fn sup_diff(u: &GridFunction, v: &GridFunction) -> Result<f64, GridError> {
    if u.grid != v.grid {
        return Err(GridError::GridMismatch);
    }
    Ok(u.values
        .iter()
        .zip(&v.values)
        .fold(0.0, |m, (&a, &b)| m.max((a - b).abs())))
}

/// Max over axis-neighbor pairs of `|Δu| / h`. A lower estimate of the true
/// Lipschitz seminorm; exact for piecewise-multilinear data.
pub fn lipschitz_estimate(u: &GridFunction) -> f64 {
    let grid = &u.grid;
    let mut best: f64 = 0.0;
    for flat in grid.iter_nodes() {
        let idx = grid.multi_index(flat);
        for axis in 0..grid.dim {
            if idx[axis] + 1 < grid.nodes[axis] {
                let mut nb = idx.clone();
                nb[axis] += 1;
                let d = (u.values[grid.flat_index(&nb)] - u.values[flat]).abs();
                best = best.max(d / grid.h);
            }
        }
    }
    best
}

/// Max over node pairs within `radius` grid steps of
/// `|u(x) - u(y)| / |x - y|^mu`. Only in-range pairs are scanned; wrapped
/// distances would be meaningless.
pub fn hoelder_estimate(u: &GridFunction, mu: f64, radius: usize) -> f64 {
    assert!(mu > 0.0 && mu <= 1.0, "mu must lie in (0, 1]");
    let grid = &u.grid;
    let offsets = hoelder_offsets(grid.dim, radius);
    let mut best: f64 = 0.0;
    for flat in grid.iter_nodes() {
        let idx = grid.multi_index(flat);
        'offset: for (d, dist) in &offsets {
            let mut nb = Vec::with_capacity(grid.dim);
            for axis in 0..grid.dim {
                let j = idx[axis] as i64 + d[axis];
                if j < 0 || j >= grid.nodes[axis] as i64 {
                    continue 'offset;
                }
                nb.push(j as usize);
            }
            let diff = (u.values[grid.flat_index(&nb)] - u.values[flat]).abs();
            best = best.max(diff / (dist * grid.h).powf(mu));
        }
    }
    best
}

/// Default pair radius for [`hoelder_estimate`].
pub const DEFAULT_HOELDER_RADIUS: usize = 8;

fn hoelder_offsets(dim: usize, radius: usize) -> Vec<(Vec<i64>, f64)> {
    // Lexicographically positive half of the ball of the given index radius.
    let r = radius as i64;
    let mut out = Vec::new();
    let mut d = vec![-r; dim];
    loop {
        let positive = d.iter().find(|&&c| c != 0).is_some_and(|&c| c > 0);
        if positive {
            let norm2: i64 = d.iter().map(|&c| c * c).sum();
            if norm2 <= r * r {
                out.push((d.clone(), (norm2 as f64).sqrt()));
            }
        }
        let mut axis = dim;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            if d[axis] < r {
                d[axis] += 1;
                break;
            }
            d[axis] = -r;
        }
    }
}

/// Write a grid function in the field-dump format: a small header followed
/// by one value per line in row-major node order.
pub fn write_field_dump(u: &GridFunction) -> String {
    let grid = &u.grid;
    let mut out = String::new();
    writeln!(out, "dim {}", grid.dim).unwrap();
    let nodes: Vec<String> = grid.nodes.iter().map(|n| n.to_string()).collect();
    writeln!(out, "nodes {}", nodes.join(" ")).unwrap();
    for (lo, hi) in grid.bounds() {
        writeln!(out, "box {lo} {hi}").unwrap();
    }
    writeln!(out, "h {}", grid.h).unwrap();
    writeln!(
        out,
        "policy {}",
        match grid.policy {
            BoundaryPolicy::Periodic => "periodic",
            BoundaryPolicy::Clamp => "clamp",
        }
    )
    .unwrap();
    writeln!(out, "values").unwrap();
    for v in &u.values {
        writeln!(out, "{v}").unwrap();
    }
    out
}

pub fn read_field_dump(text: &str) -> Result<GridFunction, GridError> {
    let mut lines = text.lines();
    let bad = |msg: &str| GridError::BadDump(msg.to_string());
    let dim_line = lines.next().ok_or_else(|| bad("missing dim"))?;
    let dim: usize = dim_line
        .strip_prefix("dim ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("bad dim line"))?;
    let nodes_line = lines.next().ok_or_else(|| bad("missing nodes"))?;
    let nodes: Vec<usize> = nodes_line
        .strip_prefix("nodes ")
        .ok_or_else(|| bad("bad nodes line"))?
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| bad("bad node count")))
        .collect::<Result<_, _>>()?;
    if nodes.len() != dim {
        return Err(bad("node counts do not match dim"));
    }
    let mut bounds = Vec::with_capacity(dim);
    for _ in 0..dim {
        let line = lines.next().ok_or_else(|| bad("missing box line"))?;
        let rest = line.strip_prefix("box ").ok_or_else(|| bad("bad box line"))?;
        let mut it = rest.split_whitespace();
        let lo: f64 = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad box lo"))?;
        let hi: f64 = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad box hi"))?;
        bounds.push((lo, hi));
    }
    let h_line = lines.next().ok_or_else(|| bad("missing h"))?;
    let h: f64 = h_line
        .strip_prefix("h ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("bad h line"))?;
    let policy_line = lines.next().ok_or_else(|| bad("missing policy"))?;
    let policy = match policy_line.strip_prefix("policy ") {
        Some("periodic") => BoundaryPolicy::Periodic,
        Some("clamp") => BoundaryPolicy::Clamp,
        _ => return Err(bad("bad policy line")),
    };
    if lines.next() != Some("values") {
        return Err(bad("missing values marker"));
    }
    let values: Vec<f64> = lines
        .map(|l| l.trim().parse().map_err(|_| bad("bad value")))
        .collect::<Result<_, _>>()?;
    let grid = Arc::new(Grid::new(&bounds, h, policy)?);
    GridFunction::new(grid, values)
}
