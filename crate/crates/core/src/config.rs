//! The run configuration file: one JSON document with a section per
//! component. Unknown keys are rejected and every validation failure names
//! the offending field path.

use crate::env::EnvConfig;
use crate::hierarchy::BudgetSchedule;
use crate::policy::{PolicyParams, DEFAULT_BIN_LENGTHS};
use crate::reward::RewardConfig;
use crate::trainer::{TrainSetup, TrainerConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{path}: cannot read config: {message}")]
    Read { path: String, message: String },
    #[error("{path}: {field}: {message}")]
    Parse {
        path: String,
        field: String,
        message: String,
    },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub bin_lengths: Vec<u32>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            bin_lengths: DEFAULT_BIN_LENGTHS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_eval: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_eval: 4096,
            seed: 1_000_003,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub reward: RewardConfig,
    pub schedule: BudgetSchedule,
    pub env: EnvConfig,
    pub policy: PolicyConfig,
    pub trainer: TrainerConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            reward: RewardConfig::default(),
            schedule: BudgetSchedule::default(),
            env: EnvConfig::default(),
            policy: PolicyConfig::default(),
            trainer: TrainerConfig::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn check_ascending(field: &str, values: &[u32]) -> Result<(), ConfigError> {
    match values.windows(2).position(|w| w[0] >= w[1]) {
        Some(i) => Err(invalid(
            format!("{field}[{}]", i + 1),
            format!(
                "must be strictly ascending, {} follows {}",
                values[i + 1],
                values[i]
            ),
        )),
        None => Ok(()),
    }
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig =
            serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
                path: path.display().to_string(),
                field: match e.path().to_string() {
                    p if p == "." => "<root>".to_string(),
                    p => p,
                },
                message: e.inner().to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }

    /// Cross-checks every section against the others.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let r = &self.reward;
        if !(r.beta.is_finite() && r.beta > 0.0) {
            return Err(invalid(
                "reward.beta",
                format!("must be finite and > 0, got {}", r.beta),
            ));
        }
        if !(r.alpha.is_finite() && r.alpha >= 0.0) {
            return Err(invalid(
                "reward.alpha",
                format!("must be finite and >= 0, got {}", r.alpha),
            ));
        }
        if r.l_max == 0 {
            return Err(invalid("reward.l_max", "must be >= 1"));
        }

        let s = &self.schedule;
        let budgets: Vec<u32> = s.budgets.iter().map(|b| b.0).collect();
        if budgets.is_empty() {
            return Err(invalid("schedule.budgets", "needs at least one budget"));
        }
        if let Some(i) = budgets.iter().position(|&b| b == 0) {
            return Err(invalid(format!("schedule.budgets[{i}]"), "must be >= 1"));
        }
        check_ascending("schedule.budgets", &budgets)?;
        if let Some(i) = budgets.iter().position(|&b| b > r.l_max) {
            return Err(invalid(
                format!("schedule.budgets[{i}]"),
                format!("{} exceeds reward.l_max = {}", budgets[i], r.l_max),
            ));
        }
        if s.rollouts_per_query == 0 || !s.rollouts_per_query.is_multiple_of(budgets.len()) {
            return Err(invalid(
                "schedule.rollouts_per_query",
                format!(
                    "{} is not divisible by {} budgets",
                    s.rollouts_per_query,
                    budgets.len()
                ),
            ));
        }

        let e = &self.env;
        if e.tiers == 0 {
            return Err(invalid("env.tiers", "must be >= 1"));
        }
        if e.required_lengths.len() != e.tiers {
            return Err(invalid(
                "env.required_lengths",
                format!(
                    "has {} entries but env.tiers = {}",
                    e.required_lengths.len(),
                    e.tiers
                ),
            ));
        }
        check_ascending("env.required_lengths", &e.required_lengths)?;
        if e.required_lengths[e.tiers - 1] >= r.l_max {
            return Err(invalid(
                format!("env.required_lengths[{}]", e.tiers - 1),
                format!("must be below reward.l_max = {}", r.l_max),
            ));
        }
        if !(0.0..=1.0).contains(&e.p_floor) {
            return Err(invalid(
                "env.p_floor",
                format!("must be in [0, 1], got {}", e.p_floor),
            ));
        }
        if !(e.p_ceil <= 1.0 && e.p_ceil > e.p_floor) {
            return Err(invalid(
                "env.p_ceil",
                format!("must be in (p_floor, 1], got {}", e.p_ceil),
            ));
        }
        if !(e.tau.is_finite() && e.tau > 0.0) {
            return Err(invalid(
                "env.tau",
                format!("must be finite and > 0, got {}", e.tau),
            ));
        }

        let bins = &self.policy.bin_lengths;
        if bins.len() < 2 {
            return Err(invalid("policy.bin_lengths", "needs at least 2 bins"));
        }
        check_ascending("policy.bin_lengths", bins)?;
        if let Some(i) = bins.iter().position(|&b| b > r.l_max) {
            return Err(invalid(
                format!("policy.bin_lengths[{i}]"),
                format!("{} exceeds reward.l_max = {}", bins[i], r.l_max),
            ));
        }

        self.trainer
            .validate()
            .map_err(|(field, message)| invalid(format!("trainer.{field}"), message))?;

        if self.eval.n_eval == 0 {
            return Err(invalid("eval.n_eval", "must be >= 1"));
        }
        Ok(())
    }

    pub fn setup(&self) -> TrainSetup<'_> {
        TrainSetup {
            reward: &self.reward,
            schedule: &self.schedule,
            env: &self.env,
            trainer: &self.trainer,
        }
    }

    pub fn initial_policy(&self) -> PolicyParams {
        PolicyParams::zeros(self.env.tiers, self.policy.bin_lengths.clone())
    }
}
