//! Experiment configuration read from JSON. Every block is optional and falls
//! back to the reference experiment; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dp::ViOptions;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::learners::{BaselinePolicy, QLearningConfig};
use crate::model::{CostModel, Model, ModelParams, ResourceDist};
use crate::salmut::SalmutConfig;
use crate::scenario::ScenarioConfig;

/// Cost tables; missing tables take the reference values for the configured `L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostsBlock {
    pub holding: f64,
    pub running: Option<Vec<f64>>,
    pub penalty: Option<Vec<f64>>,
    /// Reject tables where `c` or `c + p` decreases in the load.
    pub strict_monotone: bool,
}

impl Default for CostsBlock {
    fn default() -> Self {
        Self {
            holding: 0.12,
            running: None,
            penalty: None,
            strict_monotone: false,
        }
    }
}

impl CostsBlock {
    pub fn build(&self, cpu_levels: usize) -> Result<CostModel> {
        self.build_with(cpu_levels, true)
    }

    fn build_with(&self, cpu_levels: usize, warn: bool) -> Result<CostModel> {
        let reference = CostModel::reference(cpu_levels);
        let costs = CostModel::new(
            self.holding,
            self.running.clone().unwrap_or(reference.running),
            self.penalty.clone().unwrap_or(reference.penalty),
            cpu_levels,
        )?;
        if self.strict_monotone {
            costs.require_monotone()?;
        } else if let Some(v) = costs.monotonicity_violations().first().filter(|_| warn) {
            log::warn!(
                "costs.{} decreases at level {} ({} -> {}); structural guarantees may not hold",
                v.table,
                v.ell,
                v.value,
                v.next
            );
        }
        Ok(costs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum LearnerConfig {
    Salmut(SalmutConfig),
    Qlearning(QLearningConfig),
    Baseline(BaselinePolicy),
    Dp,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig::Salmut(SalmutConfig::default())
    }
}

impl LearnerConfig {
    pub fn name(&self) -> &'static str {
        match self {
            LearnerConfig::Salmut(_) => "salmut",
            LearnerConfig::Qlearning(_) => "qlearning",
            LearnerConfig::Baseline(_) => "baseline",
            LearnerConfig::Dp => "dp",
        }
    }

    /// Default configuration of the learner called `name`.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "salmut" => Ok(LearnerConfig::Salmut(SalmutConfig::default())),
            "qlearning" => Ok(LearnerConfig::Qlearning(QLearningConfig::default())),
            "baseline" => Ok(LearnerConfig::Baseline(BaselinePolicy::default())),
            "dp" => Ok(LearnerConfig::Dp),
            other => Err(Error::config(
                "learner.name",
                format!("unknown learner `{other}`, expected salmut, qlearning, baseline or dp"),
            )),
        }
    }

    pub fn set_horizon(&mut self, horizon: Option<u64>) {
        match self {
            LearnerConfig::Salmut(c) => c.horizon = horizon,
            LearnerConfig::Qlearning(c) => c.horizon = horizon,
            _ => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelParams,
    pub costs: CostsBlock,
    pub resources: ResourceDist,
    pub scenario: ScenarioConfig,
    pub learner: LearnerConfig,
    pub dp: ViOptions,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelParams::default(),
            costs: CostsBlock::default(),
            resources: ResourceDist::default(),
            scenario: ScenarioConfig::default(),
            learner: LearnerConfig::default(),
            dp: ViOptions::default(),
            eval: EvalConfig::default(),
            seeds: (0..10).collect(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates. Syntax and schema errors carry line and column.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|source| Error::Json {
            context: "config".into(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Json { source, .. } => Error::Json {
                context: path.display().to_string(),
                source,
            },
            other => other,
        })
    }

    pub fn model(&self) -> Result<Model> {
        self.model.validate()?;
        let costs = self.costs.build(self.model.cpu_levels)?;
        Model::new(self.model.clone(), costs, self.resources.clone())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let costs = self.costs.build_with(self.model.cpu_levels, false)?;
        Model::new(self.model.clone(), costs, self.resources.clone())?;
        self.scenario.validate()?;
        self.eval.validate(&self.model)?;
        if !(self.dp.tol > 0.0) {
            return Err(Error::config("dp.tol", "must be positive"));
        }
        match &self.learner {
            LearnerConfig::Salmut(c) => c.validate(&self.model)?,
            LearnerConfig::Qlearning(c) => c.validate()?,
            LearnerConfig::Baseline(b) => b.validate(&self.model)?,
            LearnerConfig::Dp => {}
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        Ok(())
    }

    /// Canonical JSON echo of the effective configuration.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
