use std::path::{Path, PathBuf};

use mghl_core::agent::Agent;
use mghl_core::envs::{scripted_keydoor_action, EnvStep, Environment};
use mghl_core::tensor::Tensor;
use mghl_core::trainer::{median, reset_seed, SharedParamStore};

use crate::checkpoint::load_checkpoint;
use crate::config::RunConfig;
use crate::CliError;

/// Something that can play an episode one step at a time.
pub trait EvalPolicy {
    fn begin(&mut self, obs: Tensor);
    fn step(&mut self, env: &mut dyn Environment) -> Result<EnvStep, CliError>;
}

impl EvalPolicy for Agent {
    fn begin(&mut self, obs: Tensor) {
        self.reset(obs);
    }

    fn step(&mut self, env: &mut dyn Environment) -> Result<EnvStep, CliError> {
        let tr = self.agent_step(env)?;
        Ok(EnvStep {
            obs: tr.next_obs,
            raw_ext_reward: tr.raw_ext_reward,
            scaled_ext_reward: tr.ext_reward,
            done: tr.done,
        })
    }
}

/// Shortest-path KeyDoor player, used as a known-good reference.
#[derive(Default)]
pub struct ScriptedKeyDoor {
    obs: Option<Tensor>,
}

impl EvalPolicy for ScriptedKeyDoor {
    fn begin(&mut self, obs: Tensor) {
        self.obs = Some(obs);
    }

    fn step(&mut self, env: &mut dyn Environment) -> Result<EnvStep, CliError> {
        let obs = self.obs.as_ref().ok_or_else(|| CliError::Eval("step before begin".into()))?;
        let step = env.step(scripted_keydoor_action(obs))?;
        self.obs = Some(step.obs.clone());
        Ok(step)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub episodes: usize,
    /// Scaled extrinsic returns, one per episode.
    pub returns: Vec<f64>,
    pub lengths: Vec<u64>,
    pub successes: usize,
}

impl EvalReport {
    pub fn mean_return(&self) -> f64 {
        self.returns.iter().sum::<f64>() / self.episodes as f64
    }

    pub fn median_return(&self) -> f64 {
        median(&self.returns).expect("at least one episode")
    }

    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.episodes as f64
    }

    pub fn mean_length(&self) -> f64 {
        self.lengths.iter().sum::<u64>() as f64 / self.episodes as f64
    }

    pub fn render(&self) -> String {
        format!(
            "episodes {}\nmean return {:.4}\nmedian return {:.4}\nsuccess rate {:.3}\nmean length {:.1}\nmin length {}\nmax length {}\n",
            self.episodes,
            self.mean_return(),
            self.median_return(),
            self.success_rate(),
            self.mean_length(),
            self.lengths.iter().min().expect("at least one episode"),
            self.lengths.iter().max().expect("at least one episode"),
        )
    }
}

pub fn evaluate(env: &mut dyn Environment, policy: &mut dyn EvalPolicy, episodes: usize, seed: u64) -> Result<EvalReport, CliError> {
    if episodes == 0 {
        return Err(CliError::Eval("episodes must be ≥ 1".into()));
    }
    let mut report = EvalReport { episodes, returns: Vec::new(), lengths: Vec::new(), successes: 0 };
    for ep in 0..episodes {
        policy.begin(env.reset(reset_seed(seed, 0, ep as u64)));
        let (mut ret, mut len) = (0.0, 0u64);
        loop {
            let s = policy.step(env)?;
            ret += s.scaled_ext_reward;
            len += 1;
            if s.done {
                break;
            }
        }
        report.returns.push(ret);
        report.lengths.push(len);
        report.successes += usize::from(env.succeeded());
    }
    Ok(report)
}

/// The run config stored next to a checkpoint: its own directory first, then
/// the parent (the run's output directory).
pub fn find_config(checkpoint: &Path) -> Option<PathBuf> {
    checkpoint
        .ancestors()
        .skip(1)
        .take(3)
        .map(|d| d.join("config.toml"))
        .find(|p| p.is_file())
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub episodes: usize,
    pub seed: u64,
    /// Sample actions instead of taking the most likely one.
    pub sample: bool,
    /// Overrides the config found next to the checkpoint.
    pub config: Option<PathBuf>,
}

pub fn run_eval(checkpoint: &Path, opts: &EvalOptions) -> Result<EvalReport, CliError> {
    if opts.episodes == 0 {
        return Err(CliError::Eval("episodes must be ≥ 1".into()));
    }
    let store = load_checkpoint(checkpoint)?;
    let cfg_path = match &opts.config {
        Some(p) => p.clone(),
        None => find_config(checkpoint).ok_or_else(|| {
            CliError::Eval(format!("no config.toml next to {}; pass --config", checkpoint.display()))
        })?,
    };
    let cfg = RunConfig::load(&cfg_path)?;
    cfg.validate()?;
    eval_store(&cfg, &store, opts)
}

pub fn eval_store(cfg: &RunConfig, store: &SharedParamStore, opts: &EvalOptions) -> Result<EvalReport, CliError> {
    let mut env = cfg.env.build()?;
    let mut agent = Agent::for_env(cfg.agent_config(), env.as_ref(), opts.seed)?;
    store.load_into(&mut agent, None)?;
    agent.set_greedy(!opts.sample);
    evaluate(env.as_mut(), &mut agent, opts.episodes, opts.seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mghl_core::envs::KeyDoor;

    #[test]
    fn scripted_player_always_opens_the_door() {
        let mut env = KeyDoor::new(12, 300, true);
        let r = evaluate(&mut env, &mut ScriptedKeyDoor::default(), 25, 3).unwrap();
        assert_eq!(r.success_rate(), 1.0);
        assert!(r.returns.iter().all(|&v| v == 4.0));
    }

    #[test]
    fn zero_episodes_is_an_error() {
        let mut env = KeyDoor::new(12, 300, false);
        let err = evaluate(&mut env, &mut ScriptedKeyDoor::default(), 0, 0).unwrap_err();
        assert_eq!(err.to_string(), "episodes must be ≥ 1");
    }
}
