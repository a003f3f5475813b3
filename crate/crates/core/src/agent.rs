//! Manager (one goal-policy per learned subgoal type) plus Worker, stepped
//! together against an environment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{block_partition, ActionSet, EnvError, Environment};
use crate::nets::{EncoderConfig, Encoded, GoalPolicy, LstmState, ManagerObservation, NetError, ParamSet, WorkerNet};
use crate::subgoals::{
    compose_intrinsic, direction_control_reward, feature_control_reward, mix_rewards, pixel_control_reward,
    random_subgoal_reward, Direction, PixelBlockMask, RewardError, RewardWeights, Subgoal, SubgoalKind,
};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("agent.{field}: {msg}")]
    Config { field: &'static str, msg: String },
    #[error("subgoal layout mismatch: {0}")]
    Layout(String),
    #[error("no active episode; call reset first")]
    NoEpisode,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

pub type Result<T> = std::result::Result<T, AgentError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub active_subgoals: Vec<SubgoalKind>,
    pub refresh_interval: usize,
    /// Filled from the top-level `[weights]` section of a run config.
    #[serde(skip)]
    pub weights: RewardWeights,
    pub bptt_manager: usize,
    pub bptt_worker: usize,
    pub gamma: f64,
    pub hidden_units: usize,
    /// Side length of the square pixel-control blocks.
    pub block_size: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            active_subgoals: ablation_set(3),
            refresh_interval: 1,
            weights: RewardWeights::default(),
            bptt_manager: 20,
            bptt_worker: 100,
            gamma: 0.99,
            hidden_units: 64,
            block_size: 4,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |field, msg: String| Err(AgentError::Config { field, msg });
        if self.active_subgoals.is_empty() {
            return err("active_subgoals", "must not be empty".into());
        }
        let mut sorted = self.active_subgoals.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.active_subgoals.len() {
            return err("active_subgoals", "contains duplicates".into());
        }
        if self.refresh_interval == 0 {
            return err("refresh_interval", "must be at least 1".into());
        }
        if self.bptt_manager == 0 || self.bptt_worker == 0 {
            return err("bptt_worker", "BPTT horizons must be positive".into());
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return err("gamma", format!("must be in (0, 1), got {}", self.gamma));
        }
        if self.hidden_units == 0 {
            return err("hidden_units", "must be positive".into());
        }
        if self.block_size == 0 {
            return err("block_size", "must be positive".into());
        }
        self.weights
            .validate()
            .map_err(|(field, msg)| AgentError::Config { field, msg })
    }

    /// Active kinds in one-hot layout order.
    pub fn ordered_subgoals(&self) -> Vec<SubgoalKind> {
        let mut v = self.active_subgoals.clone();
        v.sort();
        v
    }
}

/// Subgoal sets of the ablation: 1 = pc, 2 = pc+fc, 3 = pc+fc+dc, 4 = 3 plus rand.
pub fn ablation_set(goals: usize) -> Vec<SubgoalKind> {
    use SubgoalKind::*;
    match goals {
        1 => vec![PixelControl],
        2 => vec![PixelControl, FeatureControl],
        3 => vec![PixelControl, FeatureControl, DirectionControl],
        _ => vec![PixelControl, FeatureControl, DirectionControl, Random],
    }
}

/// Ordered `(kind, space)` blocks of the Worker's subgoal input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubgoalLayout {
    entries: Vec<(SubgoalKind, usize)>,
}

impl SubgoalLayout {
    pub fn new(entries: Vec<(SubgoalKind, usize)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(AgentError::Layout("empty layout".into()));
        }
        if entries.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(AgentError::Layout("kinds must follow pc, dc, fc, rand without repeats".into()));
        }
        if entries.iter().any(|&(_, n)| n == 0) {
            return Err(AgentError::Layout("zero-sized subgoal space".into()));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(SubgoalKind, usize)] {
        &self.entries
    }

    pub fn width(&self) -> usize {
        self.entries.iter().map(|&(_, n)| n).sum()
    }

    pub fn space(&self, kind: SubgoalKind) -> Option<usize> {
        self.entries.iter().find(|e| e.0 == kind).map(|e| e.1)
    }
}

/// Concatenated one-hots, one block per layout entry.
pub fn encode_subgoals(subgoals: &[Subgoal], layout: &SubgoalLayout) -> Result<Vec<f64>> {
    if subgoals.len() != layout.entries.len() {
        return Err(AgentError::Layout(format!(
            "{} subgoals for {} layout blocks",
            subgoals.len(),
            layout.entries.len()
        )));
    }
    let mut v = Vec::with_capacity(layout.width());
    for (g, &(kind, space)) in subgoals.iter().zip(&layout.entries) {
        if g.kind != kind || g.space != space || g.index >= space {
            return Err(AgentError::Layout(format!(
                "subgoal {}[{} of {}] does not fit block {kind}[{space}]",
                g.kind, g.index, g.space
            )));
        }
        v.extend(g.onehot());
    }
    Ok(v)
}

/// Categorical draw (or argmax when `greedy`) and its log-probability.
pub fn sample_action(probs: &[f64], rng: &mut impl Rng, greedy: bool) -> (usize, f64) {
    let a = if greedy {
        probs
            .iter()
            .enumerate()
            .fold(0, |best, (i, &p)| if p > probs[best] { i } else { best })
    } else {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = Some(i);
                break;
            }
        }
        pick.unwrap_or_else(|| probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1))
    };
    (a, probs[a].ln())
}

/// One Worker decision.
#[derive(Clone, Debug)]
pub struct Action {
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    pub state: LstmState,
    pub probs: Vec<f64>,
    pub features: Tensor,
}

/// Runs the Worker on one observation and draws an action.
pub fn act(
    worker: &WorkerNet,
    obs: &Tensor,
    onehots: &[f64],
    state: &LstmState,
    rng: &mut impl Rng,
    greedy: bool,
) -> Result<Action> {
    let mut tape = Tape::no_grad();
    let out = worker.step(&mut tape, worker.params().values(), obs, &Tensor::vector(onehots.to_vec()), state)?;
    let (action, log_prob) = sample_action(out.probs.data(), rng, greedy);
    Ok(Action {
        action,
        log_prob,
        value: out.value.item(),
        state: out.state,
        probs: out.probs.to_vec(),
        features: out.features,
    })
}

/// A Manager refresh: what the goal-policies saw and what they chose.
#[derive(Clone, Debug)]
pub struct ManagerDecision {
    pub observation: ManagerObservation,
    /// One per active kind, layout order.
    pub subgoals: Vec<Subgoal>,
    /// Critic value of each learned goal-policy, in goal-policy order.
    pub values: Vec<f64>,
    /// Goal-policy recurrent states before this refresh.
    pub states_before: Vec<LstmState>,
}

#[derive(Clone, Debug)]
pub struct Transition {
    pub obs: Tensor,
    pub next_obs: Tensor,
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    pub policy_entropy: f64,
    pub subgoals: Vec<Subgoal>,
    pub onehots: Vec<f64>,
    /// Per active kind, layout order.
    pub intrinsic: Vec<(SubgoalKind, f64)>,
    pub intrinsic_total: f64,
    pub raw_ext_reward: f64,
    pub ext_reward: f64,
    pub mixed_reward: f64,
    pub done: bool,
    /// Worker feature maps of `obs` and `next_obs` (only when fc is active).
    pub features: Option<(Tensor, Tensor)>,
    /// Present when the Manager refreshed the subgoals at this step.
    pub decision: Option<ManagerDecision>,
}

impl Transition {
    pub fn intrinsic_of(&self, kind: SubgoalKind) -> Option<f64> {
        self.intrinsic.iter().find(|e| e.0 == kind).map(|e| e.1)
    }
}

/// Worker outputs computed for the current step but not yet acted on.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub onehots: Vec<f64>,
    pub probs: Vec<f64>,
    pub value: f64,
    state: LstmState,
    features: Tensor,
}

#[derive(Clone, Debug)]
struct Episode {
    obs: Tensor,
    mobs: ManagerObservation,
    worker_state: LstmState,
    goal_states: Vec<LstmState>,
    subgoals: Vec<Subgoal>,
    step: usize,
    decided_at: Option<usize>,
    decision: Option<ManagerDecision>,
    encoded: Option<Encoded>,
    prepared: Option<Prepared>,
}

/// One actor's agent.
#[derive(Clone, Debug)]
pub struct Agent {
    config: AgentConfig,
    kinds: Vec<SubgoalKind>,
    layout: SubgoalLayout,
    actions: ActionSet,
    blocks: Vec<PixelBlockMask>,
    worker: WorkerNet,
    goals: Vec<GoalPolicy>,
    rng: ChaCha8Rng,
    greedy: bool,
    episode: Option<Episode>,
}

impl Agent {
    /// Builds fresh networks for an environment with the given observation
    /// shape and actions. `seed` drives both initialisation and sampling.
    pub fn new(config: AgentConfig, obs_shape: [usize; 3], actions: ActionSet, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderConfig::desk(obs_shape[0], obs_shape[1], obs_shape[2]);
        let feature_channels = encoder.feature_shape()?[0];
        let blocks = block_partition(&obs_shape, config.block_size)?;
        let kinds = config.ordered_subgoals();
        let entries = kinds
            .iter()
            .map(|&k| {
                let n = match k {
                    SubgoalKind::PixelControl => blocks.len(),
                    SubgoalKind::DirectionControl => Direction::ALL.len(),
                    SubgoalKind::FeatureControl => feature_channels,
                    SubgoalKind::Random => actions.len(),
                };
                (k, n)
            })
            .collect();
        let layout = SubgoalLayout::new(entries)?;
        let hidden = config.hidden_units;
        let worker = WorkerNet::new(encoder.clone(), hidden, layout.width(), actions.len(), &mut rng)?;
        let mut goals = Vec::new();
        for &(kind, space) in layout.entries() {
            if kind.is_learned() {
                goals.push(GoalPolicy::new(kind, space, encoder.clone(), hidden, actions.len(), &mut rng)?);
            }
        }
        Ok(Self {
            config,
            kinds,
            layout,
            actions,
            blocks,
            worker,
            goals,
            rng,
            greedy: false,
            episode: None,
        })
    }

    pub fn for_env(config: AgentConfig, env: &dyn Environment, seed: u64) -> Result<Self> {
        Self::new(config, env.observation_shape(), env.actions().clone(), seed)
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn layout(&self) -> &SubgoalLayout {
        &self.layout
    }

    pub fn active_subgoals(&self) -> &[SubgoalKind] {
        &self.kinds
    }

    pub fn actions(&self) -> &ActionSet {
        &self.actions
    }

    pub fn worker(&self) -> &WorkerNet {
        &self.worker
    }

    pub fn goal_policies(&self) -> &[GoalPolicy] {
        &self.goals
    }

    /// Greedy mode takes the argmax of every distribution.
    pub fn set_greedy(&mut self, greedy: bool) {
        self.greedy = greedy;
    }

    /// Parameter sets keyed by network: `worker`, then one per goal-policy tag.
    pub fn param_groups(&self) -> Vec<(String, &ParamSet)> {
        let mut v = vec![("worker".to_string(), self.worker.params())];
        v.extend(self.goals.iter().map(|g| (g.kind.tag().to_string(), g.params())));
        v
    }

    /// Mutable access to the same groups as [`Agent::param_groups`]. Call
    /// [`Agent::invalidate`] after changing Worker parameters mid-step.
    pub fn param_groups_mut(&mut self) -> Vec<(String, &mut ParamSet)> {
        let mut v = vec![("worker".to_string(), self.worker.params_mut())];
        v.extend(self.goals.iter_mut().map(|g| (g.kind.tag().to_string(), g.params_mut())));
        v
    }

    /// Forgets cached forward passes; subgoals already drawn for this step are kept.
    pub fn invalidate(&mut self) {
        if let Some(ep) = &mut self.episode {
            ep.encoded = None;
            ep.prepared = None;
        }
    }

    /// Starts an episode from its first observation with zeroed recurrent state.
    pub fn reset(&mut self, obs: Tensor) {
        let mobs = ManagerObservation::episode_start(obs.clone(), self.actions.len());
        self.episode = Some(Episode {
            obs,
            mobs,
            worker_state: self.worker.initial_state(),
            goal_states: self.goals.iter().map(|g| g.initial_state()).collect(),
            subgoals: Vec::new(),
            step: 0,
            decided_at: None,
            decision: None,
            encoded: None,
            prepared: None,
        });
    }

    pub fn in_episode(&self) -> bool {
        self.episode.is_some()
    }

    /// Steps taken in the current episode.
    pub fn episode_step(&self) -> usize {
        self.episode.as_ref().map_or(0, |e| e.step)
    }

    pub fn worker_state(&self) -> Option<&LstmState> {
        self.episode.as_ref().map(|e| &e.worker_state)
    }

    pub fn goal_states(&self) -> Option<&[LstmState]> {
        self.episode.as_ref().map(|e| e.goal_states.as_slice())
    }

    pub fn current_subgoals(&self) -> Option<&[Subgoal]> {
        self.episode.as_ref().map(|e| e.subgoals.as_slice())
    }

    /// Draws one subgoal per active kind from the goal-policies (uniform for
    /// rand) and advances their recurrent states.
    pub fn select_subgoals(&mut self) -> Result<ManagerDecision> {
        let ep = self.episode.as_mut().ok_or(AgentError::NoEpisode)?;
        let mut tape = Tape::no_grad();
        let states_before = ep.goal_states.clone();
        let mut subgoals = Vec::with_capacity(self.layout.entries().len());
        let mut values = Vec::with_capacity(self.goals.len());
        let mut gi = 0;
        for &(kind, space) in self.layout.entries() {
            let index = if kind.is_learned() {
                let gp = &self.goals[gi];
                let out = gp.step(&mut tape, gp.params().values(), &ep.mobs, &ep.goal_states[gi])?;
                ep.goal_states[gi] = out.state;
                values.push(out.value.item());
                gi += 1;
                sample_action(out.probs.data(), &mut self.rng, self.greedy).0
            } else {
                self.rng.gen_range(0..space)
            };
            subgoals.push(Subgoal::new(kind, index, space));
        }
        ep.subgoals = subgoals.clone();
        Ok(ManagerDecision {
            observation: ep.mobs.clone(),
            subgoals,
            values,
            states_before,
        })
    }

    /// Refreshes subgoals if due and runs the Worker on the current
    /// observation. Idempotent until [`Agent::commit`].
    pub fn prepare(&mut self) -> Result<&Prepared> {
        let ep = self.episode.as_ref().ok_or(AgentError::NoEpisode)?;
        if ep.decided_at != Some(ep.step) && ep.step % self.config.refresh_interval == 0 {
            let decision = self.select_subgoals()?;
            let ep = self.episode.as_mut().expect("episode checked above");
            ep.decided_at = Some(ep.step);
            ep.decision = Some(decision);
        }
        let ep = self.episode.as_mut().expect("episode checked above");
        if ep.prepared.is_none() {
            let onehots = encode_subgoals(&ep.subgoals, &self.layout)?;
            let mut tape = Tape::no_grad();
            let p = self.worker.params().values();
            let enc = match ep.encoded.take() {
                Some(e) => e,
                None => self.worker.encode(&mut tape, p, &ep.obs)?,
            };
            let out = self
                .worker
                .step_encoded(&mut tape, p, enc, &Tensor::vector(onehots.clone()), &ep.worker_state)?;
            ep.prepared = Some(Prepared {
                onehots,
                probs: out.probs.to_vec(),
                value: out.value.item(),
                state: out.state,
                features: out.features,
            });
        }
        Ok(ep.prepared.as_ref().expect("prepared above"))
    }

    /// Overrides the subgoals for the current step (and until the next refresh).
    pub fn set_subgoals(&mut self, subgoals: Vec<Subgoal>) -> Result<()> {
        encode_subgoals(&subgoals, &self.layout)?;
        let ep = self.episode.as_mut().ok_or(AgentError::NoEpisode)?;
        if let Some(d) = &mut ep.decision {
            d.subgoals = subgoals.clone();
        }
        ep.subgoals = subgoals;
        ep.decided_at = Some(ep.step);
        ep.prepared = None;
        Ok(())
    }

    /// The Manager refresh made for the current step, if any.
    pub fn pending_decision(&self) -> Option<&ManagerDecision> {
        self.episode.as_ref().and_then(|e| e.decision.as_ref())
    }

    /// Acts on the prepared step: samples an action, steps the environment
    /// and books all rewards. Ends the episode on `done`.
    pub fn commit(&mut self, env: &mut dyn Environment) -> Result<Transition> {
        self.prepare()?;
        let ep = self.episode.as_mut().ok_or(AgentError::NoEpisode)?;
        let prep = ep.prepared.take().expect("prepared");
        let (action, log_prob) = sample_action(&prep.probs, &mut self.rng, self.greedy);
        let step = env.step(action)?;
        let w = self.config.weights;

        let fc_active = self.layout.space(SubgoalKind::FeatureControl).is_some();
        let mut next_encoded = None;
        if fc_active && !step.done {
            let mut tape = Tape::no_grad();
            next_encoded = Some(self.worker.encode(&mut tape, self.worker.params().values(), &step.obs)?);
        }
        let features = if fc_active {
            let next = match &next_encoded {
                Some(e) => e.features.clone(),
                None => self.worker.features(&mut Tape::no_grad(), self.worker.params().values(), &step.obs)?,
            };
            Some((prep.features.clone(), next))
        } else {
            None
        };

        let mut intrinsic = Vec::with_capacity(ep.subgoals.len());
        for g in &ep.subgoals {
            let r = match g.kind {
                SubgoalKind::PixelControl => pixel_control_reward(&ep.obs, &step.obs, &self.blocks[g.index], w.eta)?,
                SubgoalKind::DirectionControl => {
                    let dir = Direction::from_index(g.index).expect("direction index in layout");
                    direction_control_reward(action, dir, &self.actions, w.dc_unit)?
                }
                SubgoalKind::FeatureControl => {
                    let (a, b) = features.as_ref().expect("features computed when fc is active");
                    feature_control_reward(a, b, g.index, w.eta)?
                }
                SubgoalKind::Random => random_subgoal_reward(action, g.index, g.space, w.dc_unit)?,
            };
            intrinsic.push((g.kind, r));
        }
        let components: Vec<f64> = intrinsic.iter().map(|e| e.1).collect();
        let intrinsic_total = compose_intrinsic(&components);
        let mixed_reward = mix_rewards(intrinsic_total, step.scaled_ext_reward, w.alpha)?;
        let policy_entropy = -prep.probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();

        let transition = Transition {
            obs: ep.obs.clone(),
            next_obs: step.obs.clone(),
            action,
            log_prob,
            value: prep.value,
            policy_entropy,
            subgoals: ep.subgoals.clone(),
            onehots: prep.onehots,
            intrinsic,
            intrinsic_total,
            raw_ext_reward: step.raw_ext_reward,
            ext_reward: step.scaled_ext_reward,
            mixed_reward,
            done: step.done,
            features,
            decision: ep.decision.take(),
        };

        if step.done {
            self.episode = None;
        } else {
            let mut prev_action = vec![0.0; self.actions.len()];
            prev_action[action] = 1.0;
            ep.mobs = ManagerObservation {
                observation: step.obs.clone(),
                prev_extrinsic_reward: step.scaled_ext_reward,
                prev_action,
            };
            ep.obs = step.obs;
            ep.worker_state = prep.state;
            ep.encoded = next_encoded;
            ep.step += 1;
        }
        Ok(transition)
    }

    /// [`Agent::prepare`] followed by [`Agent::commit`].
    pub fn agent_step(&mut self, env: &mut dyn Environment) -> Result<Transition> {
        self.prepare()?;
        self.commit(env)
    }
}

#[cfg(test)]
mod tests;
