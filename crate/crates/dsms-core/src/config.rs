//! Run configuration: a plain-text key/value format with `[sections]`,
//! merged with command-line overrides.
//!
//! ```text
//! # comment
//! [run]
//! scenario = coop_nav
//! mode = dsms
//! bandwidth = 38
//! seeds = 1,2,3
//! episodes = 5000
//! out = runs/cn38
//!
//! [trainer]
//! gamma = 0.95
//!
//! [env]
//! forest_radius = 0.3
//! ```
//!
//! Keys are namespaced as `section.key`. Unknown keys are rejected so a
//! typo cannot silently fall back to a default.

use std::collections::BTreeMap;
use std::path::PathBuf;

use thiserror::Error;

use crate::codec::full_budget;
use crate::env::{num_agents, EnvParams, Scenario};
use crate::trainer::TrainerConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("config parse error on line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("invalid value for {key}: {reason}")]
    BadValue { key: String, reason: String },
    #[error("unknown config key {0}")]
    UnknownKey(String),
    #[error("invalid run configuration: {0}")]
    Invalid(String),
}

/// Communication regime for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommMode {
    /// Utility-weighted dynamic allocation (the full pipeline).
    Dsms,
    /// Bandwidth zero: agents act on their own observations only.
    NoComm,
    /// Every agent always gets a lossless full-message budget.
    FullComm,
    /// Every agent gets the same fixed share `floor(B/n)` rounded down to
    /// even, isolating the codec's contribution from the scheduler's.
    FixedEqual,
}

impl CommMode {
    pub fn name(self) -> &'static str {
        match self {
            CommMode::Dsms => "dsms",
            CommMode::NoComm => "no_comm",
            CommMode::FullComm => "full_comm",
            CommMode::FixedEqual => "fixed_equal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dsms" => Some(CommMode::Dsms),
            "no_comm" => Some(CommMode::NoComm),
            "full_comm" => Some(CommMode::FullComm),
            "fixed_equal" => Some(CommMode::FixedEqual),
            _ => None,
        }
    }
}

/// Flat `section.key -> value` map.
#[derive(Debug, Clone, Default)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or(ConfigError::Parse {
                    line: idx + 1,
                    reason: "unterminated section header".into(),
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Parse {
                line: idx + 1,
                reason: "expected `key = value`".into(),
            })?;
            let full_key = if section.is_empty() {
                key.trim().to_string()
            } else {
                format!("{section}.{}", key.trim())
            };
            entries.insert(full_key, value.trim().to_string());
        }
        Ok(Self { entries })
    }

    /// Insert or overwrite, used for CLI overrides.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    fn take<T: std::str::FromStr>(
        &self,
        used: &mut std::collections::BTreeSet<String>,
        key: &str,
        default: T,
    ) -> Result<T, ConfigError> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(raw) => {
                used.insert(key.to_string());
                raw.parse().map_err(|_| ConfigError::BadValue {
                    key: key.to_string(),
                    reason: format!("cannot parse {raw:?}"),
                })
            }
        }
    }
}

/// Everything one experiment run needs.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub mode: CommMode,
    /// Total bandwidth in units. Zero in `no_comm`; derived in `full_comm`.
    pub bandwidth: usize,
    pub seeds: Vec<u64>,
    pub episodes: u64,
    pub out_dir: PathBuf,
    pub trainer: TrainerConfig,
    pub env: EnvParams,
}

impl RunConfig {
    /// Build from a parsed map, applying scenario defaults, then validate.
    pub fn from_map(map: &ConfigMap) -> Result<Self, ConfigError> {
        let mut used = std::collections::BTreeSet::new();

        let scenario_raw: String = map.take(&mut used, "run.scenario", "coop_nav".to_string())?;
        let scenario = Scenario::parse(&scenario_raw).ok_or_else(|| ConfigError::BadValue {
            key: "run.scenario".into(),
            reason: format!("unknown scenario {scenario_raw:?}"),
        })?;
        let mode_raw: String = map.take(&mut used, "run.mode", "dsms".to_string())?;
        let mode = CommMode::parse(&mode_raw).ok_or_else(|| ConfigError::BadValue {
            key: "run.mode".into(),
            reason: format!("unknown mode {mode_raw:?}"),
        })?;
        let default_episodes = match scenario {
            Scenario::PredatorPrey => 2000,
            Scenario::CoopNav => 5000,
        };
        let episodes: u64 = map.take(&mut used, "run.episodes", default_episodes)?;
        let seeds_raw: String = map.take(&mut used, "run.seeds", "1".to_string())?;
        let seeds = seeds_raw
            .split(',')
            .map(|s| s.trim().parse::<u64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| ConfigError::BadValue {
                key: "run.seeds".into(),
                reason: format!("cannot parse seed list {seeds_raw:?}"),
            })?;
        let out_raw: String = map.take(&mut used, "run.out", "runs/out".to_string())?;

        let mut trainer = TrainerConfig::default();
        trainer.gamma = map.take(&mut used, "trainer.gamma", trainer.gamma)?;
        trainer.lr_actor = map.take(&mut used, "trainer.lr_actor", trainer.lr_actor)?;
        trainer.lr_critic = map.take(&mut used, "trainer.lr_critic", trainer.lr_critic)?;
        trainer.soft_update_rate =
            map.take(&mut used, "trainer.soft_update", trainer.soft_update_rate)?;
        trainer.batch_segments =
            map.take(&mut used, "trainer.batch_segments", trainer.batch_segments)?;
        trainer.segment_len = map.take(&mut used, "trainer.segment_len", trainer.segment_len)?;
        trainer.exploration_sigma = map.take(
            &mut used,
            "trainer.exploration_sigma",
            trainer.exploration_sigma,
        )?;
        trainer.temperature = map.take(&mut used, "trainer.temperature", trainer.temperature)?;
        trainer.reward_scale =
            map.take(&mut used, "trainer.reward_scale", trainer.reward_scale)?;
        trainer.buffer_capacity =
            map.take(&mut used, "trainer.buffer_capacity", trainer.buffer_capacity)?;
        trainer.warmup_transitions = map.take(
            &mut used,
            "trainer.warmup_transitions",
            trainer.warmup_transitions,
        )?;
        trainer.update_every_steps = map.take(
            &mut used,
            "trainer.update_every_steps",
            trainer.update_every_steps,
        )?;
        trainer.grad_clip = map.take(&mut used, "trainer.grad_clip", trainer.grad_clip)?;
        trainer.eval_interval =
            map.take(&mut used, "trainer.eval_interval", trainer.eval_interval)?;
        trainer.eval_episodes =
            map.take(&mut used, "trainer.eval_episodes", trainer.eval_episodes)?;
        trainer.final_eval_episodes = map.take(
            &mut used,
            "trainer.final_eval_episodes",
            trainer.final_eval_episodes,
        )?;
        trainer.lstm_hidden = map.take(&mut used, "trainer.lstm_hidden", trainer.lstm_hidden)?;
        trainer.head_hidden = map.take(&mut used, "trainer.head_hidden", trainer.head_hidden)?;
        trainer.critic_hidden =
            map.take(&mut used, "trainer.critic_hidden", trainer.critic_hidden)?;
        trainer.msg_len = map.take(&mut used, "trainer.msg_len", trainer.msg_len)?;

        let mut env = EnvParams::default();
        env.world_half = map.take(&mut used, "env.world_half", env.world_half)?;
        env.dt = map.take(&mut used, "env.dt", env.dt)?;
        env.damping = map.take(&mut used, "env.damping", env.damping)?;
        env.accel = map.take(&mut used, "env.accel", env.accel)?;
        env.agent_radius = map.take(&mut used, "env.agent_radius", env.agent_radius)?;
        env.obstacle_radius = map.take(&mut used, "env.obstacle_radius", env.obstacle_radius)?;
        env.landmark_radius = map.take(&mut used, "env.landmark_radius", env.landmark_radius)?;
        env.forest_radius = map.take(&mut used, "env.forest_radius", env.forest_radius)?;
        env.window_side = map.take(&mut used, "env.window_side", env.window_side)?;
        env.leader_window_side =
            map.take(&mut used, "env.leader_window_side", env.leader_window_side)?;
        env.pp_episode_len = map.take(&mut used, "env.pp_episode_len", env.pp_episode_len)?;
        env.cn_episode_len = map.take(&mut used, "env.cn_episode_len", env.cn_episode_len)?;
        env.capture_reward = map.take(&mut used, "env.capture_reward", env.capture_reward)?;
        env.collision_penalty =
            map.take(&mut used, "env.collision_penalty", env.collision_penalty)?;
        env.prey_avoid_margin =
            map.take(&mut used, "env.prey_avoid_margin", env.prey_avoid_margin)?;

        let n = num_agents(scenario);
        let full = n * full_budget(trainer.msg_len);
        let default_bandwidth = match mode {
            CommMode::NoComm => 0,
            CommMode::FullComm => full,
            _ => 64,
        };
        let bandwidth: usize = map.take(&mut used, "run.bandwidth", default_bandwidth)?;

        for key in map.entries.keys() {
            if !used.contains(key) {
                return Err(ConfigError::UnknownKey(key.clone()));
            }
        }

        let cfg = Self {
            scenario,
            mode,
            bandwidth,
            seeds,
            episodes,
            out_dir: PathBuf::from(out_raw),
            trainer,
            env,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Mode/bandwidth consistency rules.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let n = num_agents(self.scenario);
        let full = n * full_budget(self.trainer.msg_len);
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("no seeds given".into()));
        }
        if self.episodes == 0 {
            return Err(ConfigError::Invalid("episodes must be positive".into()));
        }
        match self.mode {
            CommMode::NoComm => {
                if self.bandwidth != 0 {
                    return Err(ConfigError::Invalid(format!(
                        "no_comm runs at bandwidth 0, got {}",
                        self.bandwidth
                    )));
                }
            }
            CommMode::FullComm => {
                if self.bandwidth != full {
                    return Err(ConfigError::Invalid(format!(
                        "full_comm requires bandwidth {full} ({n} agents x lossless message), got {}",
                        self.bandwidth
                    )));
                }
            }
            CommMode::Dsms => {
                if !self.bandwidth.is_multiple_of(2) || self.bandwidth < 2 * n + 2 {
                    return Err(ConfigError::Invalid(format!(
                        "dsms needs an even bandwidth of at least {} for {n} agents, got {}",
                        2 * n + 2,
                        self.bandwidth
                    )));
                }
            }
            CommMode::FixedEqual => {
                if !self.bandwidth.is_multiple_of(2) || self.bandwidth < 2 * n {
                    return Err(ConfigError::Invalid(format!(
                        "fixed_equal needs an even bandwidth of at least {} for {n} agents, got {}",
                        2 * n,
                        self.bandwidth
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out_dir.join(format!("seed_{seed}"))
    }
}
