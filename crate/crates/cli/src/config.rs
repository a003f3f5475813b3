use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mghl_core::agent::{AgentConfig, AgentError};
use mghl_core::envs::EnvConfig;
use mghl_core::subgoals::{RewardWeights, SubgoalKind};
use mghl_core::trainer::TrainerConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Environment steps between checkpoints; a multiple of `trainer.log_interval`.
    pub checkpoint_interval: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seeds: vec![1],
            out_dir: PathBuf::from("runs"),
            checkpoint_interval: 100_000,
        }
    }
}

/// Everything one `train` or `ablate` invocation needs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub weights: RewardWeights,
    pub trainer: TrainerConfig,
    pub run: RunSection,
}

/// Command-line replacements applied on top of a config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seeds: Option<Vec<u64>>,
    pub actors: Option<usize>,
    pub subgoals: Option<Vec<SubgoalKind>>,
    pub out_dir: Option<PathBuf>,
}

fn field_error(section: &str, field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{section}.{field} {msg}"))
}

pub fn parse_subgoals(list: &str) -> Result<Vec<SubgoalKind>, CliError> {
    list.split(',')
        .map(|s| match s.trim() {
            "pc" => Ok(SubgoalKind::PixelControl),
            "dc" => Ok(SubgoalKind::DirectionControl),
            "fc" => Ok(SubgoalKind::FeatureControl),
            "rand" => Ok(SubgoalKind::Random),
            other => Err(CliError::Config(format!("unknown subgoal {other:?}, expected pc, dc, fc or rand"))),
        })
        .collect()
}

pub fn parse_seeds(list: &str) -> Result<Vec<u64>, CliError> {
    list.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CliError::Config(format!("bad seed {s:?}")))
        })
        .collect()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = &o.seeds {
            self.run.seeds = s.clone();
        }
        if let Some(n) = o.actors {
            self.trainer.num_actors = n;
        }
        if let Some(g) = &o.subgoals {
            self.agent.active_subgoals = g.clone();
        }
        if let Some(d) = &o.out_dir {
            self.run.out_dir = d.clone();
        }
    }

    /// Agent settings with the reward weights filled in.
    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            weights: self.weights,
            ..self.agent.clone()
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.env.validate().map_err(|(f, m)| field_error("env", f, m))?;
        self.weights.validate().map_err(|(f, m)| field_error("weights", f, m))?;
        self.agent_config().validate().map_err(|e| match e {
            AgentError::Config { field, msg } => field_error("agent", field, msg),
            other => CliError::Config(format!("agent {other}")),
        })?;
        self.trainer.validate().map_err(|(f, m)| field_error("trainer", f, m))?;
        if self.run.seeds.is_empty() {
            return Err(field_error("run", "seeds", "must not be empty"));
        }
        let mut seeds = self.run.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.run.seeds.len() {
            return Err(field_error("run", "seeds", "contains duplicates"));
        }
        let every = self.run.checkpoint_interval;
        if every == 0 || !every.is_multiple_of(self.trainer.log_interval) {
            return Err(field_error(
                "run",
                "checkpoint_interval",
                format!("must be a positive multiple of trainer.log_interval ({})", self.trainer.log_interval),
            ));
        }
        Ok(())
    }
}
