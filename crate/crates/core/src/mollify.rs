//! Mollification with the standard bump kernel.
//!
//! The kernel is `exp(-1/(1-|x|^2))` on the open unit ball, scaled to
//! radius `delta` and normalized discretely so the quadrature weights sum
//! to one. Constants are therefore reproduced exactly, and for a Hoelder
//! function `g` the sup-error against `g` is bounded by the modulus of
//! continuity of `g` over radius `delta` (up to quadrature error).

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MollifyError {
    #[error("delta must be positive, got {0}")]
    BadDelta(f64),
    #[error("need at least 2 quadrature nodes per axis, got {0}")]
    BadQuadrature(usize),
}

/// A mollified scalar function: `x -> sum_k w_k g(x - e_k)` over kernel
/// offsets `|e_k| < delta` with normalized weights.
pub struct Mollified<F> {
    g: F,
    offsets: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl<F: Fn(&[f64]) -> f64> Mollified<F> {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        let mut shifted = vec![0.0; x.len()];
        for (e, &w) in self.offsets.iter().zip(&self.weights) {
            for i in 0..x.len() {
                shifted[i] = x[i] - e[i];
            }
            acc += w * (self.g)(&shifted);
        }
        acc
    }
}

fn bump(rho2: f64) -> f64 {
    if rho2 < 1.0 {
        (-1.0 / (1.0 - rho2)).exp()
    } else {
        0.0
    }
}

/// Mollify `g` over the ball of radius `delta` using a tensor quadrature
/// with `quad_per_axis` nodes per axis.
pub fn mollify<F: Fn(&[f64]) -> f64>(
    g: F,
    dim: usize,
    delta: f64,
    quad_per_axis: usize,
) -> Result<Mollified<F>, MollifyError> {
    if !(delta > 0.0) {
        return Err(MollifyError::BadDelta(delta));
    }
    if quad_per_axis < 2 {
        return Err(MollifyError::BadQuadrature(quad_per_axis));
    }
    let step = 2.0 * delta / (quad_per_axis - 1) as f64;
    let mut offsets = Vec::new();
    let mut weights = Vec::new();
    let mut idx = vec![0usize; dim];
    loop {
        let e: Vec<f64> = idx.iter().map(|&i| -delta + step * i as f64).collect();
        let rho2: f64 = e.iter().map(|&c| (c / delta).powi(2)).sum();
        let w = bump(rho2);
        if w > 0.0 {
            offsets.push(e);
            weights.push(w);
        }
        let mut axis = dim;
        let done = loop {
            if axis == 0 {
                break true;
            }
            axis -= 1;
            if idx[axis] + 1 < quad_per_axis {
                idx[axis] += 1;
                break false;
            }
            idx[axis] = 0;
        };
        if done {
            break;
        }
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(Mollified {
        g,
        offsets,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_constants() {
        let m = mollify(|_x: &[f64]| 3.0, 1, 0.37, 21).unwrap();
        assert!((m.eval(&[0.2]) - 3.0).abs() < 1e-14);
        let m2 = mollify(|_x: &[f64]| 3.0, 2, 0.1, 9).unwrap();
        assert!((m2.eval(&[0.5, -0.3]) - 3.0).abs() < 1e-14);
    }

    #[test]
    fn kills_odd_moments_on_linear_data() {
        let m = mollify(|x: &[f64]| x[0], 1, 0.25, 41).unwrap();
        assert!((m.eval(&[0.7]) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn hoelder_error_bound() {
        // |mollify(g, delta) - g|_0 <= [g]_mu delta^mu + quadrature tol for
        // g(x) = |x|^(1/2), [g]_{1/2} = 1.
        let delta = 0.05;
        let m = mollify(|x: &[f64]| x[0].abs().sqrt(), 1, delta, 81).unwrap();
        let mut worst: f64 = 0.0;
        for k in 0..=200 {
            let x = -1.0 + 0.01 * k as f64;
            worst = worst.max((m.eval(&[x]) - x.abs().sqrt()).abs());
        }
        assert!(worst <= delta.sqrt() + 1e-3, "worst error {worst}");
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            mollify(|_: &[f64]| 0.0, 1, 0.0, 11).err(),
            Some(MollifyError::BadDelta(_))
        ));
        assert!(matches!(
            mollify(|_: &[f64]| 0.0, 1, 0.1, 1).err(),
            Some(MollifyError::BadQuadrature(1))
        ));
    }
}
