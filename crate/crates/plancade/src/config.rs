//! Pipeline configuration: loading, defaults, and validation.
//!
//! Configuration lives in a single TOML file. Unknown keys are an error, so
//! a typo fails the run instead of silently falling back to a default. Most
//! stage fields are optional and resolve to the standard defaults: eight
//! samples per batch, thresholds of 0.75 then 0.5, planner temperature 0.8,
//! executor temperature 0.4 for the small self-planned stage and 0.8 for
//! guided stages, and a greedy (temperature 0) single-sample terminal stage.
//!
//! Threshold comparisons use [`Comparator::MeetsOrExceeds`] unless
//! configured otherwise; see the comparator docs for why the boundary vote
//! matters.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::ModelSpec;
use crate::costing::PriceEntry;
use crate::domain::{Comparator, ConfidenceMode, PlanKind, Role, StagePolicy};

/// A fully resolved cascade configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineConfig {
    /// Seed for every random choice in a run. Mandatory: unseeded runs are
    /// unreproducible, so they refuse to start.
    pub rng_seed: u64,
    pub confidence_mode: ConfidenceMode,
    pub comparator: Comparator,
    /// Acceptance bound for perplexity mode; present exactly when that mode
    /// is selected. There is no universal default: calibrate per model.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perplexity_threshold: Option<f64>,
    /// Ordered stages, first to last; the last must be terminal.
    pub stages: Vec<StagePolicy>,
    /// Model bindings per cascade role.
    pub models: BTreeMap<Role, ModelSpec>,
    /// Price entries per model name.
    pub pricing: BTreeMap<String, PriceEntry>,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("rng_seed is required; add one to make the run reproducible")]
    MissingSeed,
    #[error("pipeline has no stages")]
    EmptyStages,
    #[error("pipeline has {0} stages; at most 3 are supported")]
    TooManyStages(usize),
    #[error("stage {stage}: threshold {value} is outside [0, 1]")]
    InvalidThreshold { stage: usize, value: f64 },
    #[error("stage {stage}: num_samples must be at least 1")]
    InvalidSampleCount { stage: usize },
    #[error("stage {stage}: temperature {value} must be finite and non-negative")]
    InvalidTemperature { stage: usize, value: f64 },
    #[error("the last stage must be terminal")]
    LastStageNotTerminal,
    #[error("stage {stage} is terminal but later stages follow it")]
    TerminalBeforeLast { stage: usize },
    #[error("confidence_mode = perplexity requires perplexity_threshold")]
    MissingPerplexityThreshold,
    #[error("perplexity_threshold is set but confidence_mode is {0}")]
    UnexpectedPerplexityThreshold(ConfidenceMode),
    #[error("perplexity_threshold {0} must be finite and positive")]
    InvalidPerplexityThreshold(f64),
    #[error("stages use the {0} role but [models.{0}] is not configured")]
    MissingModel(Role),
    #[error("model {model:?} ({role} role) has no [pricing.{model:?}] entry")]
    MissingPrice { role: Role, model: String },
    #[error("model for role {0} has an empty endpoint")]
    EmptyEndpoint(Role),
    #[error("stage {stage}: {kind} plans must come from the {expected} planner")]
    PlanKindRoleMismatch { stage: usize, kind: PlanKind, expected: Role },
}

/// Checks every structural invariant. Returns the config itself so loading
/// and validating compose.
pub fn validate_pipeline(config: PipelineConfig) -> Result<PipelineConfig, ConfigError> {
    if config.stages.is_empty() {
        return Err(ConfigError::EmptyStages);
    }
    if config.stages.len() > 3 {
        return Err(ConfigError::TooManyStages(config.stages.len()));
    }
    for (index, stage) in config.stages.iter().enumerate() {
        let stage_no = index + 1;
        if !(0.0..=1.0).contains(&stage.threshold) || !stage.threshold.is_finite() {
            return Err(ConfigError::InvalidThreshold { stage: stage_no, value: stage.threshold });
        }
        if stage.num_samples == 0 {
            return Err(ConfigError::InvalidSampleCount { stage: stage_no });
        }
        for temp in [stage.planner_temperature, stage.executor_temperature] {
            if !temp.is_finite() || temp < 0.0 {
                return Err(ConfigError::InvalidTemperature { stage: stage_no, value: temp });
            }
        }
        if stage.terminal && index + 1 != config.stages.len() {
            return Err(ConfigError::TerminalBeforeLast { stage: stage_no });
        }
        // Plan provenance is fixed: goals are small-model work, guidelines
        // are large-model work. A mismatch would break every carried plan's
        // origin label downstream.
        let expected = match stage.plan_kind {
            PlanKind::Goal => Role::Small,
            PlanKind::Guideline => Role::Large,
        };
        if stage.planner_role != expected {
            return Err(ConfigError::PlanKindRoleMismatch {
                stage: stage_no,
                kind: stage.plan_kind,
                expected,
            });
        }
    }
    if !config.stages.last().expect("nonempty").terminal {
        return Err(ConfigError::LastStageNotTerminal);
    }
    match (config.confidence_mode, config.perplexity_threshold) {
        (ConfidenceMode::Perplexity, None) => return Err(ConfigError::MissingPerplexityThreshold),
        (ConfidenceMode::Perplexity, Some(t)) if !t.is_finite() || t <= 0.0 => {
            return Err(ConfigError::InvalidPerplexityThreshold(t))
        }
        (mode, Some(_)) if mode != ConfidenceMode::Perplexity => {
            return Err(ConfigError::UnexpectedPerplexityThreshold(mode))
        }
        _ => {}
    }
    for role in used_roles(&config.stages) {
        let model = config.models.get(&role).ok_or(ConfigError::MissingModel(role))?;
        if model.endpoint.trim().is_empty() {
            return Err(ConfigError::EmptyEndpoint(role));
        }
        if !config.pricing.contains_key(&model.name) {
            return Err(ConfigError::MissingPrice { role, model: model.name.clone() });
        }
    }
    Ok(config)
}

fn used_roles(stages: &[StagePolicy]) -> Vec<Role> {
    let mut roles = Vec::new();
    for stage in stages {
        for role in [stage.planner_role, stage.executor_role] {
            if !roles.contains(&role) {
                roles.push(role);
            }
        }
    }
    roles
}

impl PipelineConfig {
    /// Parses and validates a TOML configuration string.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text)?;
        validate_pipeline(resolve(raw)?)
    }

    /// Loads and validates a TOML configuration file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Serializes the resolved configuration; parsing the result yields an
    /// equal config.
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(&SerdeShim::from(self)).expect("config serializes")
    }

    /// The standard three-stage cascade over the given seed. Stage 1 plans
    /// and executes with the small model, stage 2 guides the small executor
    /// with a large-model guideline, and the terminal stage hands the task
    /// to the large model greedily.
    pub fn default_three_stage(rng_seed: u64) -> Self {
        PipelineConfig {
            rng_seed,
            confidence_mode: ConfidenceMode::Consensus,
            comparator: Comparator::MeetsOrExceeds,
            perplexity_threshold: None,
            stages: vec![
                StagePolicy {
                    num_samples: 8,
                    threshold: 0.75,
                    planner_role: Role::Small,
                    executor_role: Role::Small,
                    planner_temperature: 0.8,
                    executor_temperature: 0.4,
                    plan_kind: PlanKind::Goal,
                    terminal: false,
                },
                StagePolicy {
                    num_samples: 8,
                    threshold: 0.5,
                    planner_role: Role::Large,
                    executor_role: Role::Small,
                    planner_temperature: 0.8,
                    executor_temperature: 0.8,
                    plan_kind: PlanKind::Guideline,
                    terminal: false,
                },
                StagePolicy {
                    num_samples: 1,
                    threshold: 1.0,
                    planner_role: Role::Large,
                    executor_role: Role::Large,
                    planner_temperature: 0.8,
                    executor_temperature: 0.0,
                    plan_kind: PlanKind::Guideline,
                    terminal: true,
                },
            ],
            models: BTreeMap::new(),
            pricing: BTreeMap::new(),
        }
    }

    /// Digest of the serialized config, for report compatibility checks.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml_string().as_bytes());
        hex::encode(&hasher.finalize()[..8])
    }
}

// The on-disk shape. Every stage field except the roles is optional.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    rng_seed: Option<i64>,
    #[serde(default)]
    confidence_mode: ConfidenceMode,
    #[serde(default)]
    comparator: Comparator,
    perplexity_threshold: Option<f64>,
    #[serde(default)]
    stage: Vec<RawStage>,
    #[serde(default)]
    models: BTreeMap<Role, ModelSpec>,
    #[serde(default)]
    pricing: BTreeMap<String, PriceEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStage {
    planner_role: Role,
    executor_role: Role,
    num_samples: Option<usize>,
    threshold: Option<f64>,
    planner_temperature: Option<f64>,
    executor_temperature: Option<f64>,
    plan_kind: Option<PlanKind>,
    terminal: Option<bool>,
}

fn resolve(raw: RawConfig) -> Result<PipelineConfig, ConfigError> {
    let rng_seed = raw.rng_seed.ok_or(ConfigError::MissingSeed)? as u64;
    let mut config = if raw.stage.is_empty() {
        PipelineConfig::default_three_stage(rng_seed)
    } else {
        let count = raw.stage.len();
        let any_terminal = raw.stage.iter().any(|s| s.terminal == Some(true));
        let stages = raw
            .stage
            .into_iter()
            .enumerate()
            .map(|(index, s)| resolve_stage(index, count, any_terminal, s))
            .collect();
        PipelineConfig {
            rng_seed,
            confidence_mode: ConfidenceMode::default(),
            comparator: Comparator::default(),
            perplexity_threshold: None,
            stages,
            models: BTreeMap::new(),
            pricing: BTreeMap::new(),
        }
    };
    config.confidence_mode = raw.confidence_mode;
    config.comparator = raw.comparator;
    config.perplexity_threshold = raw.perplexity_threshold;
    config.models = raw.models;
    for (role, model) in config.models.iter_mut() {
        model.role_default = *role;
    }
    config.pricing = raw.pricing;
    Ok(config)
}

fn resolve_stage(index: usize, count: usize, any_terminal: bool, raw: RawStage) -> StagePolicy {
    let takeover = raw.planner_role == Role::Large && raw.executor_role == Role::Large;
    let self_planned = raw.planner_role == Role::Small && raw.executor_role == Role::Small;
    let terminal = raw.terminal.unwrap_or(!any_terminal && index + 1 == count);
    StagePolicy {
        num_samples: raw.num_samples.unwrap_or(if takeover { 1 } else { 8 }),
        threshold: raw.threshold.unwrap_or(if index == 0 { 0.75 } else { 0.5 }),
        planner_role: raw.planner_role,
        executor_role: raw.executor_role,
        planner_temperature: raw.planner_temperature.unwrap_or(0.8),
        executor_temperature: raw.executor_temperature.unwrap_or(if takeover {
            0.0
        } else if self_planned {
            0.4
        } else {
            0.8
        }),
        plan_kind: raw.plan_kind.unwrap_or(if raw.planner_role == Role::Small {
            PlanKind::Goal
        } else {
            PlanKind::Guideline
        }),
        terminal,
    }
}

// Serialization wrapper matching the on-disk key names (`[[stage]]`,
// signed seed) so a resolved config round-trips through its own file format.
#[derive(Serialize)]
struct SerdeShim<'a> {
    rng_seed: i64,
    confidence_mode: ConfidenceMode,
    comparator: Comparator,
    #[serde(skip_serializing_if = "Option::is_none")]
    perplexity_threshold: Option<f64>,
    stage: &'a [StagePolicy],
    models: &'a BTreeMap<Role, ModelSpec>,
    pricing: &'a BTreeMap<String, PriceEntry>,
}

impl<'a> From<&'a PipelineConfig> for SerdeShim<'a> {
    fn from(config: &'a PipelineConfig) -> Self {
        SerdeShim {
            rng_seed: config.rng_seed as i64,
            confidence_mode: config.confidence_mode,
            comparator: config.comparator,
            perplexity_threshold: config.perplexity_threshold,
            stage: &config.stages,
            models: &config.models,
            pricing: &config.pricing,
        }
    }
}
