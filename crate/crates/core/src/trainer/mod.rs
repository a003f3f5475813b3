//! Asynchronous advantage actor-critic over a shared parameter store.
//!
//! Each actor owns an agent replica and an environment. Rollouts run on a
//! no-grad tape; every finished segment is replayed on a recording tape to
//! get its gradients, which are clipped and applied to the store under
//! per-tensor locks. The Worker learns from mixed rewards in segments of
//! `bptt_worker` steps; every goal-policy learns from extrinsic rewards in
//! segments cut every `bptt_manager` Worker steps of the same trajectory.

mod loss;
mod metrics;
mod store;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Agent, AgentError, Transition};
use crate::envs::{EnvError, Environment};
use crate::nets::{LstmState, ManagerObservation, NetError};
use crate::subgoals::SubgoalKind;
use crate::tensor::{Tensor, TensorError};

pub use loss::{
    goal_actor_loss, gradients, nstep_returns, worker_loss, LossCoefficients, LossOutput, Owner, RolloutSegment,
    SegmentInputs,
};
pub use metrics::{median, EpisodeRecord, MetricsRow, Recorder, TrainObserver, TrainSummary, UpdateRecord};
pub use store::{clip_global_norm, key, RmsProp, SharedParamStore};

use metrics::Collector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("parameter `{name}` has shape {expected:?}, got {got:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("segment owned by {got:?}, expected {expected:?}")]
    OwnerMismatch { expected: Owner, got: Owner },
    #[error("empty segment")]
    EmptySegment,
    #[error("trainer.{0}")]
    Config(String),
    #[error("actor {actor} failed: {source}")]
    Actor { actor: usize, source: Box<TrainError> },
    #[error("metrics observer failed: {0}")]
    Observer(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub num_actors: usize,
    pub learning_rate: f64,
    /// Linear decay of the learning rate to 0 at `total_steps`.
    pub lr_decay: bool,
    pub rms_decay: f64,
    pub rms_epsilon: f64,
    pub entropy_beta: f64,
    pub value_coef: f64,
    pub clip_norm: f64,
    pub total_steps: u64,
    /// Environment steps between metrics rows.
    pub log_interval: u64,
    /// Episode return (scaled) that counts as solved.
    pub threshold: f64,
    /// Trailing episodes whose median is compared with `threshold`.
    pub threshold_window: usize,
    pub stop_at_threshold: bool,
    /// Off for bitwise-reproducible metrics.
    pub record_wallclock: bool,
    /// Seeds networks, sampling and environment resets.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            num_actors: 8,
            learning_rate: 7e-4,
            lr_decay: true,
            rms_decay: 0.99,
            rms_epsilon: 1e-8,
            entropy_beta: 0.01,
            value_coef: 0.5,
            clip_norm: 40.0,
            total_steps: 2_000_000,
            log_interval: 10_000,
            threshold: 3.9,
            threshold_window: 20,
            stop_at_threshold: false,
            record_wallclock: true,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    /// Returns the offending field and a message.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        let positive = |field: &'static str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err((field, format!("must be positive, got {v}")))
            }
        };
        if self.num_actors == 0 {
            return Err(("num_actors", "must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(("learning_rate", format!("must be nonnegative, got {}", self.learning_rate)));
        }
        if !(self.rms_decay > 0.0 && self.rms_decay < 1.0) {
            return Err(("rms_decay", format!("must be in (0, 1), got {}", self.rms_decay)));
        }
        positive("rms_epsilon", self.rms_epsilon)?;
        if !(self.entropy_beta.is_finite() && self.entropy_beta >= 0.0) {
            return Err(("entropy_beta", format!("must be nonnegative, got {}", self.entropy_beta)));
        }
        positive("value_coef", self.value_coef)?;
        positive("clip_norm", self.clip_norm)?;
        if self.total_steps == 0 {
            return Err(("total_steps", "must be positive".into()));
        }
        if self.log_interval == 0 {
            return Err(("log_interval", "must be positive".into()));
        }
        if self.threshold_window == 0 {
            return Err(("threshold_window", "must be positive".into()));
        }
        Ok(())
    }

    fn coefficients(&self) -> LossCoefficients {
        LossCoefficients {
            value: self.value_coef,
            entropy_beta: self.entropy_beta,
        }
    }

    fn optimizer(&self, step: u64) -> RmsProp {
        let frac = if self.lr_decay {
            1.0 - (step as f64 / self.total_steps as f64).min(1.0)
        } else {
            1.0
        };
        RmsProp {
            learning_rate: self.learning_rate * frac,
            decay: self.rms_decay,
            epsilon: self.rms_epsilon,
        }
    }
}

/// Seed of the `episode`-th reset of actor `actor`.
pub fn reset_seed(seed: u64, actor: usize, episode: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((actor as u64) << 40) ^ episode
}

pub(crate) enum Event {
    Episode(EpisodeRecord),
    Update(UpdateRecord),
}

struct WorkerBuffer {
    init: LstmState,
    observations: Vec<Tensor>,
    onehots: Vec<Vec<f64>>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
}

impl WorkerBuffer {
    fn new(init: LstmState) -> Self {
        Self {
            init,
            observations: Vec::new(),
            onehots: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
        }
    }

    fn push(&mut self, tr: &Transition) {
        self.observations.push(tr.obs.clone());
        self.onehots.push(tr.onehots.clone());
        self.actions.push(tr.action);
        self.rewards.push(tr.mixed_reward);
    }

    fn take(&mut self, bootstrap: f64, gamma: f64, next_init: LstmState) -> RolloutSegment {
        let old = std::mem::replace(self, Self::new(next_init));
        RolloutSegment {
            owner: Owner::Worker,
            inputs: SegmentInputs::Worker {
                observations: old.observations,
                onehots: old.onehots,
            },
            actions: old.actions,
            rewards: old.rewards,
            bootstrap,
            initial_state: old.init,
            gamma,
        }
    }
}

struct GoalBuffer {
    kind: SubgoalKind,
    init: LstmState,
    observations: Vec<ManagerObservation>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
    worker_steps: usize,
}

impl GoalBuffer {
    fn new(kind: SubgoalKind, init: LstmState) -> Self {
        Self {
            kind,
            init,
            observations: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            worker_steps: 0,
        }
    }

    fn take(&mut self, bootstrap: f64, gamma: f64, next_init: LstmState) -> RolloutSegment {
        let old = std::mem::replace(self, Self::new(self.kind, next_init));
        RolloutSegment {
            owner: Owner::Goal(old.kind),
            inputs: SegmentInputs::Goal {
                observations: old.observations,
            },
            actions: old.actions,
            rewards: old.rewards,
            bootstrap,
            initial_state: old.init,
            gamma,
        }
    }
}

#[derive(Default)]
struct EpisodeAccumulator {
    length: u64,
    raw: f64,
    scaled: f64,
    intrinsic: Vec<(SubgoalKind, f64)>,
    entropy: f64,
}

impl EpisodeAccumulator {
    fn add(&mut self, tr: &Transition) {
        self.length += 1;
        self.raw += tr.raw_ext_reward;
        self.scaled += tr.ext_reward;
        self.entropy += tr.policy_entropy;
        if self.intrinsic.is_empty() {
            self.intrinsic = tr.intrinsic.iter().map(|&(k, _)| (k, 0.0)).collect();
        }
        for (acc, &(_, r)) in self.intrinsic.iter_mut().zip(&tr.intrinsic) {
            acc.1 += r;
        }
    }
}

struct Shared<'a> {
    cfg: &'a TrainerConfig,
    store: &'a SharedParamStore,
    stop: &'a AtomicBool,
}

/// What an actor reports to a probe, in the order it happens.
#[derive(Clone, Copy, Debug)]
pub enum Probe<'a> {
    Transition { actor: usize, transition: &'a Transition },
    /// Sent just before the segment's gradients are applied.
    Segment { actor: usize, segment: &'a RolloutSegment, loss: &'a LossOutput },
}

pub type ProbeFn<'a> = &'a (dyn Fn(Probe<'_>) + Sync);

struct Actor<'a> {
    id: usize,
    shared: &'a Shared<'a>,
    agent: Agent,
    env: Box<dyn Environment>,
    tx: mpsc::Sender<Event>,
    probe: Option<ProbeFn<'a>>,
}

impl Actor<'_> {
    fn update(&self, seg: RolloutSegment, step: u64) -> Result<LossOutput> {
        let cfg = self.shared.cfg;
        let coef = cfg.coefficients();
        let (grads, out) = match seg.owner {
            Owner::Worker => {
                let net = self.agent.worker();
                let (g, out) = gradients(net.params(), |tape, p| worker_loss(tape, net, p, &seg, coef))?;
                let named = net.params().names().iter().map(|n| key("worker", n)).zip(g).collect::<Vec<_>>();
                (named, out)
            }
            Owner::Goal(kind) => {
                let gp = self
                    .agent
                    .goal_policies()
                    .iter()
                    .find(|g| g.kind == kind)
                    .expect("segment kind comes from the agent");
                let (g, out) = gradients(gp.params(), |tape, p| goal_actor_loss(tape, gp, p, &seg, coef))?;
                let named = gp.params().names().iter().map(|n| key(kind.tag(), n)).zip(g).collect::<Vec<_>>();
                (named, out)
            }
        };
        if let Some(probe) = self.probe {
            probe(Probe::Segment { actor: self.id, segment: &seg, loss: &out });
        }
        self.shared.store.apply_gradients(&grads, &cfg.optimizer(step), cfg.clip_norm)?;
        if seg.owner == Owner::Worker {
            let n = seg.len() as f64;
            let _ = self.tx.send(Event::Update(UpdateRecord {
                global_step: step,
                policy_loss: out.policy_loss / n,
                value_loss: out.value_loss / n,
                entropy: out.entropy / n,
            }));
        }
        Ok(out)
    }

    fn sync(&mut self, group: &str) -> Result<()> {
        self.shared.store.load_into(&mut self.agent, Some(&[group]))
    }

    fn run(&mut self) -> Result<()> {
        let cfg = self.shared.cfg;
        let store = self.shared.store;
        let acfg = self.agent.config().clone();
        let gamma_m = acfg.gamma.powi(acfg.refresh_interval as i32);
        let kinds: Vec<SubgoalKind> = self.agent.goal_policies().iter().map(|g| g.kind).collect();
        store.load_into(&mut self.agent, None)?;

        let mut episode = 0u64;
        self.agent.reset(self.env.reset(reset_seed(cfg.seed, self.id, episode)));
        let mut wbuf = WorkerBuffer::new(self.agent.worker().initial_state());
        let mut gbufs: Vec<Option<GoalBuffer>> = kinds.iter().map(|_| None).collect();
        let mut acc = EpisodeAccumulator::default();

        while !self.shared.stop.load(Ordering::SeqCst) {
            let Some(step) = store.claim_step(cfg.total_steps) else { break };
            let bootstrap = self.agent.prepare()?.value;
            if wbuf.actions.len() >= acfg.bptt_worker {
                let init = self.agent.worker_state().expect("episode active").clone();
                let seg = wbuf.take(bootstrap, acfg.gamma, init);
                self.update(seg, step)?;
                self.sync("worker")?;
            }
            if let Some(d) = self.agent.pending_decision().cloned() {
                for (i, &kind) in kinds.iter().enumerate() {
                    let due = gbufs[i].as_ref().is_some_and(|b| b.worker_steps >= acfg.bptt_manager);
                    if due {
                        let seg = gbufs[i]
                            .as_mut()
                            .expect("due buffer")
                            .take(d.values[i], gamma_m, d.states_before[i].clone());
                        self.update(seg, step)?;
                        self.sync(kind.tag())?;
                    }
                    gbufs[i].get_or_insert_with(|| GoalBuffer::new(kind, d.states_before[i].clone()));
                }
            }

            let tr = self.agent.commit(self.env.as_mut())?;
            if let Some(probe) = self.probe {
                probe(Probe::Transition { actor: self.id, transition: &tr });
            }
            wbuf.push(&tr);
            for buf in gbufs.iter_mut().flatten() {
                if let Some(d) = &tr.decision {
                    let g = d.subgoals.iter().find(|g| g.kind == buf.kind).expect("decision covers every kind");
                    buf.observations.push(d.observation.clone());
                    buf.actions.push(g.index);
                    buf.rewards.push(0.0);
                }
                *buf.rewards.last_mut().expect("a decision precedes every step") += tr.ext_reward;
                buf.worker_steps += 1;
            }
            acc.add(&tr);

            if tr.done {
                let zero = self.agent.worker().initial_state();
                let seg = wbuf.take(0.0, acfg.gamma, zero);
                self.update(seg, step)?;
                for buf in gbufs.iter_mut() {
                    if let Some(mut b) = buf.take() {
                        let init = b.init.clone();
                        let seg = b.take(0.0, gamma_m, init);
                        self.update(seg, step)?;
                    }
                }
                store.load_into(&mut self.agent, None)?;
                let done = std::mem::take(&mut acc);
                let _ = self.tx.send(Event::Episode(EpisodeRecord {
                    actor: self.id,
                    global_step: step,
                    length: done.length,
                    ext_return_raw: done.raw,
                    ext_return_scaled: done.scaled,
                    intrinsic: done.intrinsic,
                    mean_entropy: done.entropy / done.length.max(1) as f64,
                    success: self.env.succeeded(),
                }));
                episode += 1;
                self.agent.reset(self.env.reset(reset_seed(cfg.seed, self.id, episode)));
            }
        }
        Ok(())
    }
}

/// Builds the store from `make_agent(0)`, runs `cfg.num_actors` actors until
/// `cfg.total_steps` environment steps (or the threshold, if asked), and
/// streams metrics to `observer`.
pub fn train<A, E>(
    cfg: &TrainerConfig,
    make_agent: A,
    make_env: E,
    observer: &mut dyn TrainObserver,
) -> Result<(TrainSummary, SharedParamStore)>
where
    A: Fn(usize) -> std::result::Result<Agent, AgentError> + Sync,
    E: Fn(usize) -> std::result::Result<Box<dyn Environment>, EnvError> + Sync,
{
    train_with_probe(cfg, make_agent, make_env, observer, None)
}

/// [`train`] with a probe that sees every transition and every segment.
pub fn train_with_probe<A, E>(
    cfg: &TrainerConfig,
    make_agent: A,
    make_env: E,
    observer: &mut dyn TrainObserver,
    probe: Option<ProbeFn<'_>>,
) -> Result<(TrainSummary, SharedParamStore)>
where
    A: Fn(usize) -> std::result::Result<Agent, AgentError> + Sync,
    E: Fn(usize) -> std::result::Result<Box<dyn Environment>, EnvError> + Sync,
{
    cfg.validate()
        .map_err(|(field, msg)| TrainError::Config(format!("{field}: {msg}")))?;
    let store = SharedParamStore::from_agent(&make_agent(0)?)?;
    let stop = AtomicBool::new(false);
    let shared = Shared {
        cfg,
        store: &store,
        stop: &stop,
    };
    let start = Instant::now();
    let mut collector = Collector::new(cfg, start);
    let (tx, rx) = mpsc::channel();

    let outcome = std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(cfg.num_actors);
        for id in 0..cfg.num_actors {
            let tx = tx.clone();
            let shared = &shared;
            let make_agent = &make_agent;
            let make_env = &make_env;
            handles.push(scope.spawn(move || -> Result<()> {
                let run = || -> Result<()> {
                    let mut actor = Actor {
                        id,
                        shared,
                        agent: make_agent(id)?,
                        env: make_env(id)?,
                        tx,
                        probe,
                    };
                    actor.run()
                };
                run().map_err(|e| {
                    shared.stop.store(true, Ordering::SeqCst);
                    TrainError::Actor { actor: id, source: Box::new(e) }
                })
            }));
        }
        drop(tx);
        let mut observer_error = None;
        for event in rx {
            if observer_error.is_some() {
                continue;
            }
            if let Err(e) = collector.on_event(event, &store, observer) {
                stop.store(true, Ordering::SeqCst);
                observer_error = Some(e);
            } else if cfg.stop_at_threshold && collector.steps_to_threshold().is_some() {
                stop.store(true, Ordering::SeqCst);
            }
        }
        let mut first_error = None;
        for h in handles {
            if let Err(e) = h.join().expect("actor thread panicked") {
                first_error.get_or_insert(e);
            }
        }
        match (first_error, observer_error) {
            (Some(e), _) | (None, Some(e)) => Err(e),
            (None, None) => Ok(()),
        }
    });
    outcome?;
    let summary = collector.finish(store.global_step(), &store, observer)?;
    Ok((summary, store))
}

#[cfg(test)]
mod tests;
