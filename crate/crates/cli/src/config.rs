//! Run configuration: TOML schema, loading, and resolution into a
//! problem spec plus scheme/solver/experiment parameters.
//!
//! Inline problems give the coefficient functions as expression strings
//! over `x1..xN` and `r`. The inline `f` field is the source term of the
//! equation (`u = f/c` for the drift-free scalar case); it is stored
//! negated internally so it enters the residual with a plus sign.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use obstacle_core::expr::parse_expression;
use obstacle_core::grid::{BoundaryPolicy, Grid};
use obstacle_core::problem::{
    CoefficientSet, ControlGrid, LipschitzConstants, Obstacle, ObstacleRegularity, ProblemSpec,
    Sense,
};
use obstacle_core::solver::{Mode, SchemeChoice, SolverConfig, Sweep};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("{field}: {message}")]
    Field { field: String, message: String },
}

fn field_err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    #[serde(default)]
    pub scheme: SchemeConfig,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inline: Option<InlineProblem>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct InlineProblem {
    pub dim: usize,
    pub bounds: Vec<(f64, f64)>,
    #[serde(default = "one")]
    pub controls: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second_axis: Option<usize>,
    pub sigma: Vec<Vec<String>>,
    pub b: Vec<Vec<String>>,
    pub c: Vec<String>,
    /// Source terms, one per control; stored negated internally.
    pub f: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_cols: Option<usize>,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    #[serde(default)]
    pub lipschitz: Vec<LipschitzSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obstacle: Option<ObstacleSection>,
    #[serde(default = "default_sense")]
    pub sense: Sense,
}

fn one() -> usize {
    1
}

fn default_sense() -> Sense {
    Sense::SupOverControls
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct LipschitzSection {
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub b: f64,
    #[serde(default)]
    pub c: f64,
    #[serde(default)]
    pub f: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSection {
    pub g: String,
    pub regularity: ObstacleRegularity,
    pub seminorm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d2_minus_bound: Option<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    Fdm,
    Control,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SchemeConfig {
    #[serde(default = "default_scheme_kind")]
    pub kind: SchemeKind,
    /// Grid spacing (FDM) — defaults to the preset's value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    /// Scheme step (control scheme); the grid spacing defaults to its
    /// square.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_scheme: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_grid: Option<f64>,
}

fn default_scheme_kind() -> SchemeKind {
    SchemeKind::Fdm
}

impl Default for SchemeConfig {
    fn default() -> Self {
        SchemeConfig {
            kind: SchemeKind::Fdm,
            h: None,
            h_scheme: None,
            h_grid: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_sweep")]
    pub sweep: Sweep,
}

fn default_tolerance() -> f64 {
    1e-10
}

fn default_max_iterations() -> usize {
    2_000_000
}

fn default_sweep() -> Sweep {
    Sweep::Jacobi
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            tolerance: default_tolerance(),
            max_iterations: default_max_iterations(),
            sweep: default_sweep(),
        }
    }
}

impl SolverSection {
    pub fn to_solver_config(&self) -> SolverConfig {
        SolverConfig {
            tolerance: self.tolerance,
            max_iterations: self.max_iterations,
            sweep: self.sweep,
            mode: Mode::Plain,
            ..SolverConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Solve,
    Validate,
    Consistency,
    RatesH,
    RatesEps,
    Combined,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum EpsRule {
    /// Semiconvex-Lipschitz obstacle: eps = h^(gamma/2).
    Smooth,
    /// Hoelder obstacle: eps = h^(2 gamma/3).
    Hoelder,
}

impl EpsRule {
    pub fn theta(self) -> f64 {
        match self {
            EpsRule::Smooth => 0.5,
            EpsRule::Hoelder => 2.0 / 3.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ExperimentKind>,
    #[serde(default)]
    pub h_list: Vec<f64>,
    #[serde(default = "default_reference_k")]
    pub reference_k: usize,
    #[serde(default)]
    pub eps_list: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_rule: Option<EpsRule>,
}

fn default_reference_k() -> usize {
    8
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: None,
            h_list: Vec::new(),
            reference_k: default_reference_k(),
            eps_list: Vec::new(),
            eps_rule: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
}

/// A fully resolved run: the problem, the discretization, and the
/// experiment parameters.
#[derive(Debug)]
pub struct ResolvedRun {
    pub config: RunConfig,
    pub spec: ProblemSpec,
    pub choice: SchemeChoice,
    /// Grid spacing of the primary run.
    pub h_grid: f64,
    /// Loop parameter of rate studies (grid spacing for FDM, scheme step
    /// for the control scheme).
    pub parameter: f64,
    pub solver: SolverConfig,
    pub kind: ExperimentKind,
    /// Closed-form solution when the preset has one.
    pub closed_form: Option<fn(&[f64]) -> f64>,
}

impl ResolvedRun {
    pub fn grid(&self) -> Arc<Grid> {
        Arc::new(
            Grid::new(&self.spec.bounds, self.h_grid, BoundaryPolicy::Periodic)
                .expect("resolved grid"),
        )
    }

    /// Grid and scheme choice for a given loop parameter.
    pub fn discretization_at(&self, parameter: f64) -> (Arc<Grid>, SchemeChoice) {
        let (h, choice) = match self.choice {
            SchemeChoice::Fdm => (parameter, SchemeChoice::Fdm),
            SchemeChoice::Control { .. } => (
                parameter * parameter,
                SchemeChoice::Control {
                    h_scheme: parameter,
                },
            ),
        };
        (
            Arc::new(
                Grid::new(&self.spec.bounds, h, BoundaryPolicy::Periodic)
                    .expect("resolved grid"),
            ),
            choice,
        )
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(toml::from_str(&text)?)
}

fn build_inline(inline: &InlineProblem) -> Result<ProblemSpec, ConfigError> {
    let total = inline.controls * inline.second_axis.unwrap_or(1);
    let p_cols = inline.p_cols.unwrap_or(inline.dim);
    let parse = |field: String, src: &str| {
        parse_expression(src).map_err(|e| field_err(&field, e.to_string()))
    };
    let mut sigma = Vec::new();
    for (i, row) in inline.sigma.iter().enumerate() {
        let mut exprs = Vec::new();
        for (j, s) in row.iter().enumerate() {
            exprs.push(parse(format!("problem.inline.sigma[{i}][{j}]"), s)?);
        }
        sigma.push(exprs);
    }
    let mut b = Vec::new();
    for (i, row) in inline.b.iter().enumerate() {
        let mut exprs = Vec::new();
        for (j, s) in row.iter().enumerate() {
            exprs.push(parse(format!("problem.inline.b[{i}][{j}]"), s)?);
        }
        b.push(exprs);
    }
    let mut c = Vec::new();
    for (i, s) in inline.c.iter().enumerate() {
        c.push(parse(format!("problem.inline.c[{i}]"), s)?);
    }
    let mut f = Vec::new();
    for (i, s) in inline.f.iter().enumerate() {
        // Negate the user-facing source term.
        f.push(parse(
            format!("problem.inline.f[{i}]"),
            &format!("0 - ({s})"),
        )?);
    }
    let lipschitz: Vec<LipschitzConstants> = if inline.lipschitz.is_empty() {
        vec![LipschitzConstants::zero(); total]
    } else {
        inline
            .lipschitz
            .iter()
            .map(|l| LipschitzConstants {
                sigma: l.sigma,
                b: l.b,
                c: l.c,
                f: l.f,
            })
            .collect()
    };
    let coefficients = CoefficientSet::new(
        inline.dim,
        p_cols,
        total,
        sigma,
        b,
        c,
        f,
        inline.lambda_lo,
        inline.lambda_hi,
        lipschitz,
    )
    .map_err(|e| field_err("problem.inline", e.to_string()))?;
    let mut controls = ControlGrid::new(inline.controls)
        .map_err(|e| field_err("problem.inline.controls", e.to_string()))?;
    if let Some(second) = inline.second_axis {
        controls = controls.with_second_axis(
            ControlGrid::new(second)
                .map_err(|e| field_err("problem.inline.second_axis", e.to_string()))?,
        );
    }
    let obstacle = match &inline.obstacle {
        None => None,
        Some(obs) => Some(Obstacle {
            g: parse("problem.inline.obstacle.g".to_string(), &obs.g)?,
            regularity: obs.regularity,
            seminorm: obs.seminorm,
            d2_minus_bound: obs.d2_minus_bound,
        }),
    };
    ProblemSpec::new(
        inline.dim,
        inline.bounds.clone(),
        controls,
        coefficients,
        obstacle,
        inline.sense,
    )
    .map_err(|e| field_err("problem.inline", e.to_string()))
}

/// Resolve a loaded configuration: expand the preset or inline problem,
/// fill defaults, and validate experiment parameters. `verb_kind` is the
/// experiment implied by the CLI verb, if any; a conflicting explicit
/// `experiment.kind` is rejected.
pub fn resolve(
    config: RunConfig,
    verb_kind: Option<ExperimentKind>,
) -> Result<ResolvedRun, ConfigError> {
    let kind = match (config.experiment.kind, verb_kind) {
        (Some(k), None) => k,
        (None, Some(k)) => k,
        (Some(k), Some(v)) => {
            let compatible = k == v
                || (v == ExperimentKind::RatesH
                    && matches!(
                        k,
                        ExperimentKind::RatesEps | ExperimentKind::Combined
                    ));
            if !compatible {
                return Err(field_err(
                    "experiment.kind",
                    format!("{k:?} contradicts the `{v:?}` verb"),
                ));
            }
            k
        }
        (None, None) => {
            return Err(field_err("experiment.kind", "missing experiment kind"))
        }
    };

    let (spec, preset_h, preset_h_scheme, closed_form) = match (
        &config.problem.preset,
        &config.problem.inline,
    ) {
        (Some(_), Some(_)) => {
            return Err(field_err(
                "problem",
                "give either a preset name or an inline problem, not both",
            ))
        }
        (None, None) => {
            return Err(field_err(
                "problem",
                "either a preset name or an inline problem is required",
            ))
        }
        (Some(name), None) => {
            let preset = obstacle_core::presets::find(name)
                .ok_or_else(|| field_err("problem.preset", format!("unknown preset `{name}`")))?;
            let cf = if preset.has_closed_form() {
                Some(preset_closed_form(preset))
            } else {
                None
            };
            (
                preset.spec(),
                Some(preset.default_h),
                Some(preset.default_h_scheme),
                cf,
            )
        }
        (None, Some(inline)) => (build_inline(inline)?, None, None, None),
    };

    let (choice, h_grid, parameter) = match config.scheme.kind {
        SchemeKind::Fdm => {
            let h = config
                .scheme
                .h
                .or(preset_h)
                .ok_or_else(|| field_err("scheme.h", "grid spacing required"))?;
            if !(h > 0.0) {
                return Err(field_err("scheme.h", "must be positive"));
            }
            (SchemeChoice::Fdm, h, h)
        }
        SchemeKind::Control => {
            let h_scheme = config
                .scheme
                .h_scheme
                .or(preset_h_scheme)
                .ok_or_else(|| field_err("scheme.h_scheme", "scheme step required"))?;
            if !(h_scheme > 0.0) {
                return Err(field_err("scheme.h_scheme", "must be positive"));
            }
            let h_grid = config.scheme.h_grid.unwrap_or(h_scheme * h_scheme);
            if !(h_grid > 0.0) {
                return Err(field_err("scheme.h_grid", "must be positive"));
            }
            (SchemeChoice::Control { h_scheme }, h_grid, h_scheme)
        }
    };

    if !(config.solver.tolerance > 0.0) {
        return Err(field_err("solver.tolerance", "must be positive"));
    }

    let check_list = |field: &str, list: &[f64], required: bool| -> Result<(), ConfigError> {
        if required && list.is_empty() {
            return Err(field_err(field, "must be nonempty"));
        }
        for (i, &v) in list.iter().enumerate() {
            if !(v > 0.0) {
                return Err(field_err(&format!("{field}[{i}]"), "must be positive"));
            }
        }
        if list.windows(2).any(|w| w[1] >= w[0]) {
            return Err(field_err(field, "must be strictly decreasing"));
        }
        Ok(())
    };
    match kind {
        ExperimentKind::RatesH | ExperimentKind::Combined => {
            check_list("experiment.h_list", &config.experiment.h_list, true)?;
            if config.experiment.reference_k < 1 {
                return Err(field_err("experiment.reference_k", "must be at least 1"));
            }
        }
        ExperimentKind::RatesEps => {
            check_list("experiment.eps_list", &config.experiment.eps_list, true)?;
        }
        ExperimentKind::Consistency => {
            check_list("experiment.h_list", &config.experiment.h_list, true)?;
        }
        _ => {
            check_list("experiment.h_list", &config.experiment.h_list, false)?;
            check_list("experiment.eps_list", &config.experiment.eps_list, false)?;
        }
    }
    if kind == ExperimentKind::Combined && config.experiment.eps_rule.is_none() {
        return Err(field_err("experiment.eps_rule", "required for `combined`"));
    }

    let solver = config.solver.to_solver_config();
    Ok(ResolvedRun {
        config,
        spec,
        choice,
        h_grid,
        parameter,
        solver,
        kind,
        closed_form,
    })
}

fn preset_closed_form(preset: &'static obstacle_core::presets::Preset) -> fn(&[f64]) -> f64 {
    // Wrap the registry's closed form behind a stable fn pointer per
    // preset name (fn pointers cannot capture the preset reference).
    match preset.name {
        "zero-diffusion-1d" => |x| {
            obstacle_core::presets::find("zero-diffusion-1d")
                .unwrap()
                .closed_form(x)
                .unwrap()
        },
        "zero-diffusion-2d" => |x| {
            obstacle_core::presets::find("zero-diffusion-2d")
                .unwrap()
                .closed_form(x)
                .unwrap()
        },
        _ => unreachable!("closed form requested for preset without one"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_preset_config_fills_defaults() {
        let config: RunConfig = toml::from_str(
            r#"
            [problem]
            preset = "zero-diffusion-1d"
            [experiment]
            kind = "solve"
            "#,
        )
        .unwrap();
        assert_eq!(config.solver.tolerance, 1e-10);
        assert_eq!(config.solver.sweep, Sweep::Jacobi);
        let run = resolve(config, None).unwrap();
        assert_eq!(run.kind, ExperimentKind::Solve);
        assert_eq!(run.h_grid, 1.0 / 128.0);
        assert!(run.closed_form.is_some());
    }

    #[test]
    fn inline_problem_resolves_and_negates_source() {
        let config: RunConfig = toml::from_str(
            r#"
            [problem.inline]
            dim = 1
            bounds = [[0.0, 1.0]]
            sigma = [["0"]]
            b = [["0"]]
            c = ["1"]
            f = ["2"]
            lambda_lo = 1.0
            lambda_hi = 1.0
            [scheme]
            kind = "fdm"
            h = 0.0625
            [experiment]
            kind = "solve"
            "#,
        )
        .unwrap();
        let run = resolve(config, None).unwrap();
        // Source 2 with c = 1: stored f evaluates to -2.
        assert_eq!(run.spec.coefficients.eval_f(0, &[0.3], 0.0), -2.0);
    }

    #[test]
    fn unknown_preset_rejected() {
        let config: RunConfig = toml::from_str(
            r#"
            [problem]
            preset = "no-such"
            [experiment]
            kind = "solve"
            "#,
        )
        .unwrap();
        let err = resolve(config, None).unwrap_err();
        assert!(err.to_string().contains("problem.preset"), "{err}");
    }

    #[test]
    fn negative_eps_rejected_with_field_path() {
        let config: RunConfig = toml::from_str(
            r#"
            [problem]
            preset = "smooth-obstacle-1d"
            [experiment]
            kind = "rates-eps"
            eps_list = [0.5, -0.25]
            "#,
        )
        .unwrap();
        let err = resolve(config, None).unwrap_err();
        assert!(
            err.to_string().contains("experiment.eps_list[1]"),
            "{err}"
        );
    }

    #[test]
    fn contradictory_kind_rejected() {
        let config: RunConfig = toml::from_str(
            r#"
            [problem]
            preset = "smooth-obstacle-1d"
            [experiment]
            kind = "solve"
            "#,
        )
        .unwrap();
        assert!(resolve(config, Some(ExperimentKind::Validate)).is_err());
    }

    #[test]
    fn malformed_expression_has_field_path() {
        let config: RunConfig = toml::from_str(
            r#"
            [problem.inline]
            dim = 1
            bounds = [[0.0, 1.0]]
            sigma = [["0"]]
            b = [["0"]]
            c = ["1 +"]
            f = ["0"]
            lambda_lo = 1.0
            lambda_hi = 1.0
            [experiment]
            kind = "solve"
            "#,
        )
        .unwrap();
        let err = resolve(config, None).unwrap_err();
        assert!(err.to_string().contains("problem.inline.c[0]"), "{err}");
    }

    #[test]
    fn config_round_trips_through_toml() {
        let config: RunConfig = toml::from_str(
            r#"
            seed = 11
            [problem]
            preset = "smooth-obstacle-1d"
            [experiment]
            kind = "rates-eps"
            eps_list = [0.125, 0.0625]
            "#,
        )
        .unwrap();
        let text = toml::to_string(&config).unwrap();
        let reloaded: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(config, reloaded);
    }
}
