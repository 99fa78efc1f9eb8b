//! Experiment configuration (TOML) and its resolution into library objects.

use std::path::{Path, PathBuf};

use koopman_roa::dynsys::{builtin, parse_system, BuiltinParams, DomainBox, SystemSpec, VectorField};
use koopman_roa::odeint::IntegrationParams;
use koopman_roa::scenario::Xi;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const PRESETS: [(&str, &str); 3] = [
    ("example1", include_str!("../presets/example1.toml")),
    ("example2", include_str!("../presets/example2.toml")),
    ("example3", include_str!("../presets/example3.toml")),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    pub eta: f64,
    pub m: usize,
    pub collocation_box: BoxConfig,
    /// Keep only collocation points whose trajectories converge.
    #[serde(default)]
    pub collocation_filter: bool,
    #[serde(rename = "N")]
    pub n_scenarios: usize,
    pub beta: f64,
    #[serde(default)]
    pub xi: XiSetting,
    pub seeds: Seeds,
    pub outputs: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub integration: IntegrationConfig,
    #[serde(default)]
    pub validation: ValidationConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub force_origin_shell: bool,
}

/// Either a built-in system or explicit expressions on a domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<String>,
    #[serde(default, skip_serializing_if = "BuiltinParams::is_empty")]
    pub params: BuiltinParams,
    /// Seed for randomly parameterized built-ins.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expressions: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<BoxConfig>,
}

/// `[-half_width, half_width]ⁿ` or explicit bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub half_width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<Vec<f64>>,
}

impl BoxConfig {
    pub fn symmetric(half_width: f64) -> Self {
        Self {
            half_width: Some(half_width),
            lower: None,
            upper: None,
        }
    }

    fn resolve(&self, field: &str, dim: usize) -> Result<DomainBox, CliError> {
        let r = match (self.half_width, &self.lower, &self.upper) {
            (Some(h), None, None) => DomainBox::symmetric(dim, h),
            (None, Some(l), Some(u)) => {
                if l.len() != dim || u.len() != dim {
                    return Err(CliError::config(field, format!("bounds must have {dim} entries")));
                }
                DomainBox::new(l.clone(), u.clone())
            }
            _ => return Err(CliError::config(field, "give either `half_width` or both `lower` and `upper`")),
        };
        r.map_err(|e| CliError::config(field, e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum XiSetting {
    Value(f64),
    Keyword(String),
}

impl Default for XiSetting {
    fn default() -> Self {
        XiSetting::Keyword("auto".into())
    }
}

impl XiSetting {
    fn resolve(&self) -> Result<Xi, CliError> {
        match self {
            XiSetting::Keyword(k) if k == "auto" => Ok(Xi::Auto),
            XiSetting::Keyword(k) => Err(CliError::config("xi", format!("expected a number or \"auto\", got {k:?}"))),
            XiSetting::Value(v) if *v > 0.0 && v.is_finite() => Ok(Xi::Value(*v)),
            XiSetting::Value(v) => Err(CliError::config("xi", format!("{v} is not positive"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub collocation: u64,
    pub scenario: u64,
    pub validation: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// One-based state indices spanning the cross-section.
    pub axes: [usize; 2],
    pub resolution: usize,
}

/// Overrides of the integrator defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrationConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rel_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abs_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_converge: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_escape: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationConfig {
    /// Fresh uniform points for the violation estimate; defaults to `N`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<usize>,
    /// Shell points integrated by the trajectory oracle.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_points: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub singular_rtol: Option<f64>,
    /// Subtract `φ(0)` from every eigenfunction.
    #[serde(default)]
    pub center: bool,
}

pub const DEFAULT_ORACLE_POINTS: usize = 1000;

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {}", e.message().trim()).replace('\n', " ") + &span_hint(text, e.span())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn preset(name: &str) -> Result<Self, CliError> {
        let text = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| CliError::Config(format!("unknown preset `{name}` (known: example1, example2, example3)")))?;
        Self::from_toml(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every field and builds the system, boxes and integrator settings.
    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let vf = self.system.build()?;
        let n = vf.dim();
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(CliError::config("eta", format!("{} is not positive", self.eta)));
        }
        if self.m < n + 1 {
            return Err(CliError::config("m", format!("{} collocation points are fewer than n + 1 = {}", self.m, n + 1)));
        }
        let collocation_box = self.collocation_box.resolve("collocation_box", n)?;
        if !vf.domain().contains_box(&collocation_box) {
            return Err(CliError::config("collocation_box", "must lie inside the system domain"));
        }
        if self.n_scenarios < 100 {
            return Err(CliError::config("N", format!("{} < 100 scenarios", self.n_scenarios)));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(CliError::config("beta", format!("{} is outside (0, 1)", self.beta)));
        }
        let xi = self.xi.resolve()?;
        if let Some(g) = &self.grid {
            if g.axes.iter().any(|a| *a == 0 || *a > n) || g.axes[0] == g.axes[1] {
                return Err(CliError::config("grid.axes", format!("need two distinct indices in 1..={n}")));
            }
            if g.resolution == 0 {
                return Err(CliError::config("grid.resolution", "must be positive"));
            }
        }
        let mut integration = IntegrationParams::for_domain(vf.domain());
        let ic = &self.integration;
        integration.rel_tol = ic.rel_tol.unwrap_or(integration.rel_tol);
        integration.abs_tol = ic.abs_tol.unwrap_or(integration.abs_tol);
        integration.t_max = ic.t_max.unwrap_or(integration.t_max);
        integration.r_converge = ic.r_converge.unwrap_or(integration.r_converge);
        integration.r_escape = ic.r_escape.unwrap_or(integration.r_escape);
        integration.max_steps = ic.max_steps.unwrap_or(integration.max_steps);
        integration.validate().map_err(|e| CliError::config("integration", e.to_string()))?;
        if let Some(r) = self.solver.singular_rtol {
            if !(r > 0.0 && r < 1.0) {
                return Err(CliError::config("solver.singular_rtol", format!("{r} is outside (0, 1)")));
            }
        }
        let validation_points = self.validation.points.unwrap_or(self.n_scenarios);
        if validation_points == 0 {
            return Err(CliError::config("validation.points", "must be positive"));
        }
        Ok(Resolved {
            config: self.clone(),
            vf,
            collocation_box,
            integration,
            xi,
            validation_points,
            oracle_points: self.validation.oracle_points.unwrap_or(DEFAULT_ORACLE_POINTS),
        })
    }
}

/// ` (line L, field `table.key`)` for the key whose value the parser rejected.
fn span_hint(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    let Some(r) = span else {
        return String::new();
    };
    let start = r.start.min(text.len());
    let line = text[..start].matches('\n').count() + 1;
    let line_start = text[..start].rfind('\n').map_or(0, |i| i + 1);
    let line_text = &text[line_start..];
    let line_text = line_text.split('\n').next().unwrap_or("");
    let Some((key, _)) = line_text.split_once('=') else {
        return format!(" (line {line})");
    };
    let key = key.trim();
    let table = text[..line_start]
        .lines()
        .rev()
        .find_map(|l| l.trim().strip_prefix('[').and_then(|l| l.strip_suffix(']')).map(str::to_string));
    match table {
        Some(t) => format!(" (line {line}, field `{t}.{key}`)"),
        None => format!(" (line {line}, field `{key}`)"),
    }
}

impl SystemConfig {
    pub fn build(&self) -> Result<VectorField, CliError> {
        match (&self.builtin, &self.expressions) {
            (Some(name), None) => {
                if self.domain.is_some() {
                    return Err(CliError::config("system.domain", "built-in systems fix their own domain"));
                }
                builtin(name, &self.params, self.seed).map_err(|e| CliError::config("system", e.to_string()))
            }
            (None, Some(exprs)) => {
                if !self.params.is_empty() {
                    return Err(CliError::config("system.params", "only built-in systems take parameters"));
                }
                let domain = self
                    .domain
                    .as_ref()
                    .ok_or_else(|| CliError::config("system.domain", "required with `expressions`"))?
                    .resolve("system.domain", exprs.len())?;
                let spec = SystemSpec {
                    expressions: exprs.clone(),
                    domain,
                };
                parse_system(&spec).map_err(|e| CliError::config("system.expressions", e.to_string()))
            }
            _ => Err(CliError::config("system", "give exactly one of `builtin` and `expressions`")),
        }
    }
}

/// A validated configuration with its derived objects.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub vf: VectorField,
    pub collocation_box: DomainBox,
    pub integration: IntegrationParams,
    pub xi: Xi,
    pub validation_points: usize,
    pub oracle_points: usize,
}
