//! Run configuration: JSON schema, defaults and validation.

use serde::{Deserialize, Serialize};

/// A validation failure tied to a config field (dotted path).
#[derive(Debug, Clone)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    fn new(field: &str, message: impl Into<String>) -> Self {
        Self { field: field.to_string(), message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelName {
    Heisenberg,
    Sphere,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: ModelName,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Chain,
    Geodesic,
    CurvatureReport,
    EmbedVerify,
    Suite,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Chain => "chain",
            TaskKind::Geodesic => "geodesic",
            TaskKind::CurvatureReport => "curvature-report",
            TaskKind::EmbedVerify => "embed-verify",
            TaskKind::Suite => "suite",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingKind {
    /// `S³ → S⁵`, `(z, w) ↦ (z, w, 0)`.
    Linear,
    /// `S³ → S⁵`, `(z, w) ↦ (z², √2 zw, w²)`.
    Whitney,
    /// `H¹ → H²`, `(z, u) ↦ (z, 0, u)`.
    HeisenbergInclusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuiteKind {
    Theorem1,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialData {
    /// Chart coordinates `(x₁, y₁, …, x_n, y_n, u)`; defaults to the base point.
    #[serde(default)]
    pub point: Option<Vec<f64>>,
    /// Chain parameter `a^α` as `[re, im]` pairs; defaults to zero.
    #[serde(default)]
    pub a: Option<Vec<[f64; 2]>>,
    /// Fiber coordinate of the initial point on the circle bundle.
    #[serde(default)]
    pub fiber: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveSpec {
    pub rtol: f64,
    pub atol: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Numerics {
    pub step: f64,
    pub t_span: f64,
    /// Step for differentiating connection forms.
    pub fd_step: f64,
    /// Step for differentiating curvature tensors.
    pub covariant_fd_step: f64,
    /// Step for differentiating the circle-bundle metric.
    pub metric_fd_step: f64,
    /// Bound on `‖a‖` past which chain integration halts.
    pub blowup: f64,
    /// Dormand–Prince with step control instead of fixed-step RK4.
    pub adaptive: Option<AdaptiveSpec>,
}

impl Default for Numerics {
    fn default() -> Self {
        Self {
            step: 1e-2,
            t_span: 1.0,
            fd_step: 1e-3,
            covariant_fd_step: 1e-2,
            metric_fd_step: 1e-3,
            blowup: 1e3,
            adaptive: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub chain: f64,
    pub lift: f64,
    pub sff: f64,
    pub null: f64,
    pub loop_defect: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { chain: 1e-4, lift: 1e-7, sff: 1e-8, null: 1e-6, loop_defect: 1e-6 }
    }
}

/// Chain-preservation sweep: `count` values of `a` in the ball of `radius`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub count: usize,
    pub radius: f64,
    pub t_span: f64,
    pub step: f64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self { count: 20, radius: 1.0, t_span: 0.5, step: 0.005 }
    }
}

/// Random square loops for the lift closedness check.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopSpec {
    pub count: usize,
    pub side: f64,
    pub nodes: usize,
    /// Half-width of the box around the evaluation point holding loop centres.
    pub radius: f64,
}

impl Default for LoopSpec {
    fn default() -> Self {
        Self { count: 4, side: 0.1, nodes: 8, radius: 0.3 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    /// Output directory; `--out` takes precedence.
    pub dir: Option<String>,
    /// File stem; defaults to the task name.
    pub prefix: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: Option<ModelSpec>,
    pub task: TaskKind,
    #[serde(default)]
    pub embedding: Option<EmbeddingKind>,
    #[serde(default)]
    pub suite: Option<SuiteKind>,
    #[serde(default)]
    pub initial: InitialData,
    #[serde(default)]
    pub numerics: Numerics,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub loops: LoopSpec,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output: OutputSpec,
}

pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { String::new() } else { path };
        let inner = e.into_inner();
        // serde reports missing or unknown keys against the enclosing object
        let msg = inner.to_string();
        let field = match (missing_or_unknown(&msg), field.is_empty()) {
            (Some(k), true) => k,
            (Some(k), false) if field == k || field.ends_with(&format!(".{k}")) => field,
            (Some(k), false) => format!("{field}.{k}"),
            (None, _) => field,
        };
        ConfigError { field, message: msg }
    })?;
    validate(&cfg)?;
    Ok(cfg)
}

fn missing_or_unknown(msg: &str) -> Option<String> {
    for prefix in ["missing field `", "unknown field `"] {
        if let Some(rest) = msg.strip_prefix(prefix) {
            return rest.split('`').next().map(str::to_string);
        }
    }
    None
}

fn positive(field: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ConfigError::new(field, format!("must be positive and finite, got {v}")))
    }
}

pub fn validate(cfg: &RunConfig) -> Result<(), ConfigError> {
    let nu = &cfg.numerics;
    positive("numerics.step", nu.step)?;
    positive("numerics.t_span", nu.t_span)?;
    positive("numerics.fd_step", nu.fd_step)?;
    positive("numerics.covariant_fd_step", nu.covariant_fd_step)?;
    positive("numerics.metric_fd_step", nu.metric_fd_step)?;
    positive("numerics.blowup", nu.blowup)?;
    if let Some(a) = nu.adaptive {
        positive("numerics.adaptive.rtol", a.rtol)?;
        positive("numerics.adaptive.atol", a.atol)?;
    }
    let t = &cfg.tolerances;
    positive("tolerances.chain", t.chain)?;
    positive("tolerances.lift", t.lift)?;
    positive("tolerances.sff", t.sff)?;
    positive("tolerances.null", t.null)?;
    positive("tolerances.loop_defect", t.loop_defect)?;
    positive("sweep.radius", cfg.sweep.radius)?;
    positive("sweep.t_span", cfg.sweep.t_span)?;
    positive("sweep.step", cfg.sweep.step)?;
    if cfg.sweep.count == 0 {
        return Err(ConfigError::new("sweep.count", "must be at least 1"));
    }
    positive("loops.side", cfg.loops.side)?;
    positive("loops.radius", cfg.loops.radius)?;
    if cfg.loops.nodes == 0 {
        return Err(ConfigError::new("loops.nodes", "must be at least 1"));
    }
    if !cfg.initial.fiber.is_finite() {
        return Err(ConfigError::new("initial.fiber", "must be finite"));
    }
    if let Some(p) = &cfg.output.prefix {
        if p.is_empty() || p.contains(['/', '\\']) {
            return Err(ConfigError::new("output.prefix", "must be a non-empty file stem"));
        }
    }

    // dimensions follow from the model, or from the embedding's source
    let n = match cfg.task {
        TaskKind::Chain | TaskKind::Geodesic | TaskKind::CurvatureReport => {
            let m = cfg.model.as_ref().ok_or_else(|| ConfigError::new("model", "required for this task"))?;
            if m.n == 0 {
                return Err(ConfigError::new("model.n", "must be at least 1"));
            }
            m.n
        }
        TaskKind::EmbedVerify => {
            if cfg.embedding.is_none() {
                return Err(ConfigError::new("embedding", "required for embed-verify"));
            }
            1
        }
        TaskKind::Suite => {
            if cfg.suite.is_none() {
                return Err(ConfigError::new("suite", "required for suite"));
            }
            1
        }
    };
    if let Some(p) = &cfg.initial.point {
        if p.len() != 2 * n + 1 {
            return Err(ConfigError::new("initial.point", format!("expected {} coordinates, got {}", 2 * n + 1, p.len())));
        }
        if !p.iter().all(|v| v.is_finite()) {
            return Err(ConfigError::new("initial.point", "coordinates must be finite"));
        }
    }
    if let Some(a) = &cfg.initial.a {
        if a.len() != n {
            return Err(ConfigError::new("initial.a", format!("expected {n} complex entries, got {}", a.len())));
        }
        if !a.iter().flatten().all(|v| v.is_finite()) {
            return Err(ConfigError::new("initial.a", "entries must be finite"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let c = parse(r#"{"model": {"name": "heisenberg", "n": 1}, "task": "chain"}"#).unwrap();
        assert_eq!(c.task, TaskKind::Chain);
        assert_eq!(c.numerics.step, 1e-2);
        assert_eq!(c.tolerances.chain, 1e-4);
    }

    #[test]
    fn negative_step_names_field() {
        let e = parse(r#"{"model": {"name": "sphere", "n": 1}, "task": "chain", "numerics": {"step": -0.1}}"#).unwrap_err();
        assert_eq!(e.field, "numerics.step");
    }

    #[test]
    fn unknown_model_names_field() {
        let e = parse(r#"{"model": {"name": "torus", "n": 1}, "task": "chain"}"#).unwrap_err();
        assert_eq!(e.field, "model.name");
    }

    #[test]
    fn unknown_task_names_field() {
        let e = parse(r#"{"model": {"name": "sphere", "n": 1}, "task": "fly"}"#).unwrap_err();
        assert_eq!(e.field, "task");
    }

    #[test]
    fn missing_key_names_field() {
        let e = parse(r#"{"model": {"name": "sphere"}, "task": "chain"}"#).unwrap_err();
        assert_eq!(e.field, "model.n");
        let e = parse(r#"{"model": {"name": "sphere", "n": 1}}"#).unwrap_err();
        assert_eq!(e.field, "task");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let e = parse(r#"{"model": {"name": "sphere", "n": 1}, "task": "chain", "numerics": {"stp": 1}}"#).unwrap_err();
        assert_eq!(e.field, "numerics.stp");
    }

    #[test]
    fn point_length_checked() {
        let e = parse(r#"{"model": {"name": "sphere", "n": 2}, "task": "chain", "initial": {"point": [0, 0, 0]}}"#).unwrap_err();
        assert_eq!(e.field, "initial.point");
    }

    #[test]
    fn task_requirements() {
        assert_eq!(parse(r#"{"task": "chain"}"#).unwrap_err().field, "model");
        assert_eq!(parse(r#"{"task": "embed-verify"}"#).unwrap_err().field, "embedding");
        assert_eq!(parse(r#"{"task": "suite"}"#).unwrap_err().field, "suite");
        assert!(parse(r#"{"task": "suite", "suite": "theorem1"}"#).is_ok());
    }
}
