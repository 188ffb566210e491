//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known and may appear at most once; values are parsed by type.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::agent::{default_n_sample, AgentConfig, EntropyController, SamplerState};
use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::flow::{NoiseSchedule, ScheduleVariant, TargetMode};
use crate::gmm::{EmConfig, DEFAULT_ACTIONS_PER_STATE, DEFAULT_COMPONENTS};

/// How actions are picked from the policy's candidates during fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exploration {
    /// Sample in proportion to `exp(ξ·Q)`.
    EntropyGuided,
    /// Always take the highest-valued candidate.
    Greedy,
}

impl Exploration {
    pub fn name(self) -> &'static str {
        match self {
            Exploration::EntropyGuided => "entropy-guided",
            Exploration::Greedy => "greedy",
        }
    }
}

impl fmt::Display for Exploration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Exploration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy-guided" => Ok(Exploration::EntropyGuided),
            "greedy" => Ok(Exploration::Greedy),
            _ => Err(Error::Config(format!("unknown exploration mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub env: EnvKind,
    pub seed: u64,
    pub dataset_size: usize,
    pub offline_steps: usize,
    pub online_steps: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub log_interval: usize,
    pub hidden: Vec<usize>,
    pub eta: f64,
    pub schedule: ScheduleVariant,
    pub target: TargetMode,
    pub flow_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub bc_alpha: f64,
    pub discount: f64,
    pub tau: f64,
    pub min_of_two: bool,
    pub exploration: Exploration,
    pub xi_init: f64,
    pub xi_learning_rate: f64,
    pub entropy_period: usize,
    /// Defaults to `−dim(A)` when unset.
    pub target_entropy: Option<f64>,
    /// Defaults to `max(4, ⌈dim(A)/2⌉)` when unset.
    pub n_sample: Option<usize>,
    pub actions_per_state: usize,
    pub gmm_components: usize,
    /// States per entropy estimate; defaults to the batch size.
    pub entropy_states: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let agent = AgentConfig::default();
        Self {
            env: EnvKind::PointMaze,
            seed: 0,
            dataset_size: 10_000,
            offline_steps: 20_000,
            online_steps: 20_000,
            eval_interval: 2_000,
            eval_episodes: 20,
            log_interval: 500,
            hidden: vec![64, 64],
            eta: 0.1,
            schedule: ScheduleVariant::ShiftedExponential,
            target: TargetMode::Plain,
            flow_steps: agent.flow_steps,
            batch_size: agent.batch_size,
            learning_rate: agent.learning_rate,
            bc_alpha: agent.bc_alpha,
            discount: agent.discount,
            tau: agent.tau,
            min_of_two: false,
            exploration: Exploration::EntropyGuided,
            xi_init: 1.0,
            xi_learning_rate: EntropyController::DEFAULT_LEARNING_RATE,
            entropy_period: EntropyController::DEFAULT_UPDATE_PERIOD,
            target_entropy: None,
            n_sample: None,
            actions_per_state: DEFAULT_ACTIONS_PER_STATE,
            gmm_components: DEFAULT_COMPONENTS,
            entropy_states: None,
        }
    }
}

const KEYS: &[&str] = &[
    "env",
    "seed",
    "dataset_size",
    "offline_steps",
    "online_steps",
    "eval_interval",
    "eval_episodes",
    "log_interval",
    "hidden",
    "eta",
    "schedule",
    "target",
    "flow_steps",
    "batch_size",
    "learning_rate",
    "bc_alpha",
    "discount",
    "tau",
    "min_of_two",
    "exploration",
    "xi_init",
    "xi_learning_rate",
    "entropy_period",
    "target_entropy",
    "n_sample",
    "actions_per_state",
    "gmm_components",
    "entropy_states",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show_optional<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), T::to_string)
}

impl RunConfig {
    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key '{key}'",
                    i + 1
                )));
            }
            config
                .set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_prefix(e))))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "env" => {
                self.env = value
                    .parse()
                    .map_err(|e: Error| Error::Config(strip_prefix(e)))?
            }
            "seed" => self.seed = parse(key, value)?,
            "dataset_size" => self.dataset_size = parse(key, value)?,
            "offline_steps" => self.offline_steps = parse(key, value)?,
            "online_steps" => self.online_steps = parse(key, value)?,
            "eval_interval" => self.eval_interval = parse(key, value)?,
            "eval_episodes" => self.eval_episodes = parse(key, value)?,
            "log_interval" => self.log_interval = parse(key, value)?,
            "hidden" => {
                self.hidden = value
                    .split(',')
                    .map(|v| parse(key, v.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "eta" => self.eta = parse(key, value)?,
            "schedule" => {
                self.schedule = value
                    .parse()
                    .map_err(|e: Error| Error::Config(strip_prefix(e)))?
            }
            "target" => {
                self.target = value
                    .parse()
                    .map_err(|e: Error| Error::Config(strip_prefix(e)))?
            }
            "flow_steps" => self.flow_steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "bc_alpha" => self.bc_alpha = parse(key, value)?,
            "discount" => self.discount = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "min_of_two" => self.min_of_two = parse(key, value)?,
            "exploration" => self.exploration = value.parse()?,
            "xi_init" => self.xi_init = parse(key, value)?,
            "xi_learning_rate" => self.xi_learning_rate = parse(key, value)?,
            "entropy_period" => self.entropy_period = parse(key, value)?,
            "target_entropy" => self.target_entropy = parse_optional(key, value)?,
            "n_sample" => self.n_sample = parse_optional(key, value)?,
            "actions_per_state" => self.actions_per_state = parse(key, value)?,
            "gmm_components" => self.gmm_components = parse(key, value)?,
            "entropy_states" => self.entropy_states = parse_optional(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dataset_size", self.dataset_size),
            ("eval_interval", self.eval_interval),
            ("eval_episodes", self.eval_episodes),
            ("log_interval", self.log_interval),
            ("entropy_period", self.entropy_period),
            ("actions_per_state", self.actions_per_state),
            ("gmm_components", self.gmm_components),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{key} must be positive")));
            }
        }
        if self.eval_interval % self.log_interval != 0 {
            return Err(Error::Config(
                "eval_interval must be a multiple of log_interval".into(),
            ));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(
                "hidden must list positive layer widths".into(),
            ));
        }
        if self.actions_per_state < self.gmm_components {
            return Err(Error::Config(
                "actions_per_state must be at least gmm_components".into(),
            ));
        }
        if matches!(self.n_sample, Some(0)) || matches!(self.entropy_states, Some(0)) {
            return Err(Error::Config(
                "n_sample and entropy_states must be positive".into(),
            ));
        }
        if !self.xi_init.is_finite() || !self.xi_learning_rate.is_finite() {
            return Err(Error::Config(
                "temperature parameters must be finite".into(),
            ));
        }
        if self.target_entropy.is_some_and(|h| !h.is_finite()) {
            return Err(Error::Config("target_entropy must be finite".into()));
        }
        self.agent_config()
            .validate()
            .map_err(|e| Error::Config(strip_prefix(e)))?;
        self.noise_schedule()
            .map_err(|e| Error::Config(strip_prefix(e)))?;
        Ok(())
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            bc_alpha: self.bc_alpha,
            discount: self.discount,
            tau: self.tau,
            batch_size: self.batch_size,
            flow_steps: self.flow_steps,
            learning_rate: self.learning_rate,
        }
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.eta, self.schedule)
    }

    pub fn sampler_state(&self, action_dim: usize) -> SamplerState {
        SamplerState {
            xi: self.xi_init,
            n_sample: self
                .n_sample
                .unwrap_or_else(|| default_n_sample(action_dim)),
        }
    }

    pub fn entropy_controller(&self, action_dim: usize) -> EntropyController {
        EntropyController {
            target_entropy: self.target_entropy.unwrap_or(-(action_dim as f64)),
            learning_rate: self.xi_learning_rate,
            update_period: self.entropy_period,
        }
    }

    pub fn em_config(&self) -> EmConfig {
        EmConfig {
            seed: self.seed,
            ..EmConfig::default()
        }
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let hidden: Vec<String> = self.hidden.iter().map(usize::to_string).collect();
        let pairs: [(&str, String); 28] = [
            ("env", self.env.to_string()),
            ("seed", self.seed.to_string()),
            ("dataset_size", self.dataset_size.to_string()),
            ("offline_steps", self.offline_steps.to_string()),
            ("online_steps", self.online_steps.to_string()),
            ("eval_interval", self.eval_interval.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("log_interval", self.log_interval.to_string()),
            ("hidden", hidden.join(",")),
            ("eta", self.eta.to_string()),
            ("schedule", self.schedule.to_string()),
            ("target", self.target.to_string()),
            ("flow_steps", self.flow_steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("bc_alpha", self.bc_alpha.to_string()),
            ("discount", self.discount.to_string()),
            ("tau", self.tau.to_string()),
            ("min_of_two", self.min_of_two.to_string()),
            ("exploration", self.exploration.to_string()),
            ("xi_init", self.xi_init.to_string()),
            ("xi_learning_rate", self.xi_learning_rate.to_string()),
            ("entropy_period", self.entropy_period.to_string()),
            ("target_entropy", show_optional(&self.target_entropy)),
            ("n_sample", show_optional(&self.n_sample)),
            ("actions_per_state", self.actions_per_state.to_string()),
            ("gmm_components", self.gmm_components.to_string()),
            ("entropy_states", show_optional(&self.entropy_states)),
        ];
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(m) | Error::InvalidArgument(m) => m,
        other => other.to_string(),
    }
}
