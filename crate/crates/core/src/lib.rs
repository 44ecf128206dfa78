//! Monotone approximation schemes and penalization solvers for obstacle
//! problems of non-convex second-order degenerate elliptic equations
//! (Isaacs / Bellman type) on periodic boxes.
//!
//! The library is organized bottom-up:
//!
//! - [`expr`]: a small expression language for coefficient functions;
//! - [`grid`]: uniform grids, grid functions, norms, seminorm estimators;
//! - [`mollify`]: bump-kernel mollification used by the analysis bounds;
//! - [`problem`]: problem descriptions and assumption validation;
//! - [`fdm`]: the finite-difference (transition weight) scheme;
//! - [`control`]: the semi-discrete control scheme;
//! - [`solver`]: fixed-point and penalized/obstacle solvers;
//! - [`analysis`]: a priori bounds, dependence bounds, and rate fitting;
//! - [`presets`]: named benchmark problems used by the experiment CLI.

pub mod analysis;
pub mod control;
pub mod expr;
pub mod fdm;
pub mod grid;
pub mod mollify;
pub mod presets;
pub mod problem;
pub mod solver;
