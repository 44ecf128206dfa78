//! Named preset problems used by the experiment harness and the CLI.
//!
//! All presets live on the periodic unit box, satisfy the structural
//! assumptions (unit normalization, positive `lambda_0`), and ship with a
//! partially binding obstacle unless noted. Two of them are degenerate
//! with zero drift and therefore have the pointwise closed form
//! `u = max(g, src/c)`, which serves as the exact oracle in tests.

use std::sync::Arc;

use crate::expr::{parse_expression, Expression};
use crate::grid::{BoundaryPolicy, Grid};
use crate::problem::{
    CoefficientSet, ControlGrid, LipschitzConstants, Obstacle, ObstacleRegularity, ProblemSpec,
    Sense,
};

const TAU: f64 = 6.283185307179586;

/// A registry entry: problem builder plus default discretization
/// parameters and, where available, the exact solution.
pub struct Preset {
    pub name: &'static str,
    pub summary: &'static str,
    /// Default grid spacing for FDM runs.
    pub default_h: f64,
    /// Default scheme step for control-scheme runs (grid spacing is its
    /// square).
    pub default_h_scheme: f64,
    build: fn() -> ProblemSpec,
    closed_form: Option<fn(&[f64]) -> f64>,
}

impl Preset {
    pub fn spec(&self) -> ProblemSpec {
        (self.build)()
    }

    pub fn has_closed_form(&self) -> bool {
        self.closed_form.is_some()
    }

    pub fn closed_form(&self, x: &[f64]) -> Option<f64> {
        self.closed_form.map(|f| f(x))
    }

    /// Periodic grid over the preset's box at the given spacing.
    pub fn grid(&self, h: f64) -> Arc<Grid> {
        let spec = self.spec();
        Arc::new(Grid::new(&spec.bounds, h, BoundaryPolicy::Periodic).expect("preset grid"))
    }

    pub fn default_grid(&self) -> Arc<Grid> {
        self.grid(self.default_h)
    }
}

fn expr(s: &str) -> Expression {
    parse_expression(s).expect("preset expression")
}

fn single_control_1d(
    sigma: f64,
    b: f64,
    src: &str,
    f_lip: f64,
    obstacle: Option<Obstacle>,
) -> ProblemSpec {
    ProblemSpec::new(
        1,
        vec![(0.0, 1.0)],
        ControlGrid::new(1).unwrap(),
        CoefficientSet::new(
            1,
            1,
            1,
            vec![vec![Expression::constant(sigma)]],
            vec![vec![Expression::constant(b)]],
            vec![Expression::constant(1.0)],
            vec![expr(src)],
            1.0,
            1.0,
            vec![LipschitzConstants {
                sigma: 0.0,
                b: 0.0,
                c: 0.0,
                f: f_lip,
            }],
        )
        .unwrap(),
        obstacle,
        Sense::SupOverControls,
    )
    .unwrap()
}

fn zero_diffusion_1d() -> ProblemSpec {
    single_control_1d(
        0.0,
        0.0,
        "0 - sin(6.283185307179586*x1)",
        6.3,
        Some(Obstacle {
            g: expr("0.4 + 0.4*cos(6.283185307179586*x1)"),
            regularity: ObstacleRegularity::Lipschitz,
            seminorm: 2.6,
            d2_minus_bound: None,
        }),
    )
}

fn zero_diffusion_1d_exact(x: &[f64]) -> f64 {
    let s = (TAU * x[0]).sin();
    s.max(0.4 + 0.4 * (TAU * x[0]).cos())
}

const DRIFT_SRC: &str = "0 - 0.5 - 0.7*sin(6.283185307179586*x1)";
const DRIFT_F_LIP: f64 = 4.4;

fn smooth_obstacle_1d() -> ProblemSpec {
    single_control_1d(
        0.0,
        0.5,
        DRIFT_SRC,
        DRIFT_F_LIP,
        Some(Obstacle {
            g: expr("0.55 + 0.3*cos(6.283185307179586*x1)"),
            regularity: ObstacleRegularity::SemiconvexLipschitz,
            seminorm: 1.9,
            d2_minus_bound: Some(12.0),
        }),
    )
}

fn hoelder_obstacle_1d() -> ProblemSpec {
    single_control_1d(
        0.0,
        0.5,
        DRIFT_SRC,
        DRIFT_F_LIP,
        Some(Obstacle {
            g: expr("0.3 + 0.5*sqrt(abs(sin(3.141592653589793*x1)))"),
            regularity: ObstacleRegularity::Hoelder(0.5),
            seminorm: 1.0,
            d2_minus_bound: None,
        }),
    )
}

fn degenerate_obstacle_1d() -> ProblemSpec {
    single_control_1d(
        0.0,
        0.5,
        DRIFT_SRC,
        DRIFT_F_LIP,
        Some(Obstacle {
            g: expr("0.9 - 0.8*abs(sin(3.141592653589793*x1))"),
            regularity: ObstacleRegularity::Lipschitz,
            seminorm: 2.6,
            d2_minus_bound: None,
        }),
    )
}

fn diffusion_drift_1d() -> ProblemSpec {
    // sigma^2 = 0.4, so the normalization sum is 0.4 + |b| = 0.7 <= 1.
    single_control_1d(
        0.4f64.sqrt(),
        0.3,
        DRIFT_SRC,
        DRIFT_F_LIP,
        Some(Obstacle {
            g: expr("0.55 + 0.3*cos(6.283185307179586*x1)"),
            regularity: ObstacleRegularity::SemiconvexLipschitz,
            seminorm: 1.9,
            d2_minus_bound: Some(12.0),
        }),
    )
}

fn two_control_1d() -> ProblemSpec {
    // Inf-sup over 2 x 2 controls: outer axis picks the drift direction,
    // inner axis picks the source. Coefficients are ordered outer-major.
    let drifts = [0.4, -0.4];
    let sources = [
        "0 - 0.5 - 0.6*sin(6.283185307179586*x1)",
        "0 - 0.6 - 0.5*cos(6.283185307179586*x1)",
    ];
    let mut sigma = Vec::new();
    let mut b = Vec::new();
    let mut c = Vec::new();
    let mut f = Vec::new();
    let mut lip = Vec::new();
    for &drift in &drifts {
        for src in &sources {
            sigma.push(vec![Expression::constant(0.0)]);
            b.push(vec![Expression::constant(drift)]);
            c.push(Expression::constant(1.0));
            f.push(expr(src));
            lip.push(LipschitzConstants {
                sigma: 0.0,
                b: 0.0,
                c: 0.0,
                f: 3.8,
            });
        }
    }
    ProblemSpec::new(
        1,
        vec![(0.0, 1.0)],
        ControlGrid::new(2)
            .unwrap()
            .with_labels(vec!["drift+".into(), "drift-".into()])
            .with_second_axis(ControlGrid::new(2).unwrap()),
        CoefficientSet::new(1, 1, 4, sigma, b, c, f, 1.0, 1.0, lip).unwrap(),
        Some(Obstacle {
            g: expr("0.55 + 0.25*cos(6.283185307179586*x1)"),
            regularity: ObstacleRegularity::SemiconvexLipschitz,
            seminorm: 1.6,
            d2_minus_bound: Some(10.0),
        }),
        Sense::InfSup,
    )
    .unwrap()
}

fn zero_diffusion_2d() -> ProblemSpec {
    let zero = Expression::constant(0.0);
    ProblemSpec::new(
        2,
        vec![(0.0, 1.0), (0.0, 1.0)],
        ControlGrid::new(1).unwrap(),
        CoefficientSet::new(
            2,
            1,
            1,
            vec![vec![zero.clone(), zero.clone()]],
            vec![vec![zero.clone(), zero.clone()]],
            vec![Expression::constant(1.0)],
            vec![expr(
                "0 - sin(6.283185307179586*x1)*cos(6.283185307179586*x2)",
            )],
            1.0,
            1.0,
            vec![LipschitzConstants {
                sigma: 0.0,
                b: 0.0,
                c: 0.0,
                f: 8.9,
            }],
        )
        .unwrap(),
        Some(Obstacle {
            g: expr("0.3 + 0.3*cos(6.283185307179586*x1)*cos(6.283185307179586*x2)"),
            regularity: ObstacleRegularity::Lipschitz,
            seminorm: 2.7,
            d2_minus_bound: None,
        }),
        Sense::SupOverControls,
    )
    .unwrap()
}

fn zero_diffusion_2d_exact(x: &[f64]) -> f64 {
    let s = (TAU * x[0]).sin() * (TAU * x[1]).cos();
    s.max(0.3 + 0.3 * (TAU * x[0]).cos() * (TAU * x[1]).cos())
}

fn cross_derivative_2d() -> ProblemSpec {
    // a = sigma sigma^T = [[1/2, 1/4], [1/4, 1/2]] via its Cholesky factor:
    // diagonally dominant, normalization sum 2*(1/2 - 1/4) + 0.2 <= 1.
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
            vec![vec![Expression::constant(0.1), Expression::constant(0.1)]],
            vec![Expression::constant(1.0)],
            vec![expr(
                "0 - 0.5 - 0.5*sin(6.283185307179586*x1)*sin(6.283185307179586*x2)",
            )],
            1.0,
            1.0,
            vec![LipschitzConstants {
                sigma: 0.0,
                b: 0.0,
                c: 0.0,
                f: 4.5,
            }],
        )
        .unwrap(),
        Some(Obstacle {
            g: expr("0.5 + 0.2*cos(6.283185307179586*x1)*cos(6.283185307179586*x2)"),
            regularity: ObstacleRegularity::SemiconvexLipschitz,
            seminorm: 1.8,
            d2_minus_bound: Some(16.0),
        }),
        Sense::SupOverControls,
    )
    .unwrap()
}

static REGISTRY: &[Preset] = &[
    Preset {
        name: "zero-diffusion-1d",
        summary: "degenerate 1D problem with pointwise closed form max(g, src/c)",
        default_h: 1.0 / 128.0,
        default_h_scheme: 1.0 / 16.0,
        build: zero_diffusion_1d,
        closed_form: Some(zero_diffusion_1d_exact),
    },
    Preset {
        name: "smooth-obstacle-1d",
        summary: "degenerate drift problem with semiconvex C^2 obstacle",
        default_h: 1.0 / 256.0,
        default_h_scheme: 1.0 / 16.0,
        build: smooth_obstacle_1d,
        closed_form: None,
    },
    Preset {
        name: "hoelder-obstacle-1d",
        summary: "degenerate drift problem with 1/2-Hoelder obstacle",
        default_h: 1.0 / 256.0,
        default_h_scheme: 1.0 / 16.0,
        build: hoelder_obstacle_1d,
        closed_form: None,
    },
    Preset {
        name: "degenerate-obstacle-1d",
        summary: "degenerate drift problem with Lipschitz (concave-kink) obstacle",
        default_h: 1.0 / 256.0,
        default_h_scheme: 1.0 / 16.0,
        build: degenerate_obstacle_1d,
        closed_form: None,
    },
    Preset {
        name: "diffusion-drift-1d",
        summary: "nondegenerate 1D problem with diffusion, drift, and obstacle",
        default_h: 1.0 / 64.0,
        default_h_scheme: 1.0 / 16.0,
        build: diffusion_drift_1d,
        closed_form: None,
    },
    Preset {
        name: "two-control-1d",
        summary: "inf-sup problem over 2x2 controls with semiconvex obstacle",
        default_h: 1.0 / 64.0,
        default_h_scheme: 1.0 / 16.0,
        build: two_control_1d,
        closed_form: None,
    },
    Preset {
        name: "zero-diffusion-2d",
        summary: "degenerate 2D problem with pointwise closed form",
        default_h: 1.0 / 32.0,
        default_h_scheme: 1.0 / 8.0,
        build: zero_diffusion_2d,
        closed_form: Some(zero_diffusion_2d_exact),
    },
    Preset {
        name: "cross-derivative-2d",
        summary: "2D diffusion with cross-derivative term a12 = 1/4 and drift",
        default_h: 1.0 / 128.0,
        default_h_scheme: 1.0 / 8.0,
        build: cross_derivative_2d,
        closed_form: None,
    },
];

pub fn registry() -> &'static [Preset] {
    REGISTRY
}

pub fn find(name: &str) -> Option<&'static Preset> {
    REGISTRY.iter().find(|p| p.name == name)
}

pub fn names() -> Vec<&'static str> {
    REGISTRY.iter().map(|p| p.name).collect()
}
