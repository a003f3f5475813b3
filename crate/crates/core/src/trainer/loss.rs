use super::{Result, TrainError};
use crate::nets::{GoalPolicy, LstmState, ManagerObservation, ParamSet, WorkerNet};
use crate::subgoals::SubgoalKind;
use crate::tensor::{Tape, Tensor};

/// Which network a segment trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Owner {
    Worker,
    Goal(SubgoalKind),
}

#[derive(Clone, Debug, PartialEq)]
pub enum SegmentInputs {
    Worker {
        observations: Vec<Tensor>,
        /// Concatenated subgoal one-hots per step.
        onehots: Vec<Vec<f64>>,
    },
    Goal { observations: Vec<ManagerObservation> },
}

/// Up to one BPTT window of experience for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutSegment {
    pub owner: Owner,
    pub inputs: SegmentInputs,
    /// Environment actions for the Worker, subgoal indices for a goal-policy.
    pub actions: Vec<usize>,
    /// Mixed rewards for the Worker, scaled extrinsic rewards for a goal-policy.
    pub rewards: Vec<f64>,
    /// Critic value after the last step; 0 when the episode ended.
    pub bootstrap: f64,
    pub initial_state: LstmState,
    pub gamma: f64,
}

impl RolloutSegment {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossCoefficients {
    pub value: f64,
    pub entropy_beta: f64,
}

impl Default for LossCoefficients {
    fn default() -> Self {
        Self {
            value: 0.5,
            entropy_beta: 0.01,
        }
    }
}

/// A loss on its tape plus the numbers behind it.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: Tensor,
    pub returns: Vec<f64>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Sums over the segment.
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

/// `R_t = r_t + γ·R_{t+1}` with `R_T = bootstrap`.
pub fn nstep_returns(rewards: &[f64], bootstrap: f64, gamma: f64) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(TrainError::EmptySegment);
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(TrainError::Config(format!("gamma must be in (0, 1), got {gamma}")));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = bootstrap;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *o = acc;
    }
    Ok(out)
}

/// Actor-critic loss from `[T, A]` probabilities and `[T]` values:
/// `Σ_t −log π(a_t)·A_t + c_v·(R_t − V_t)² − β·H(π_t)` with `A_t` held constant.
fn actor_critic(
    tape: &mut Tape,
    probs: &Tensor,
    values: &Tensor,
    actions: &[usize],
    returns: Vec<f64>,
    coef: LossCoefficients,
) -> Result<LossOutput> {
    let (steps, width) = (probs.shape()[0], probs.shape()[1]);
    let v: Vec<f64> = values.to_vec();
    let advantages: Vec<f64> = returns.iter().zip(&v).map(|(r, v)| r - v).collect();
    let mut weights = vec![0.0; steps * width];
    for (t, &a) in actions.iter().enumerate() {
        if a >= width {
            return Err(TrainError::Config(format!("action {a} outside {width} outputs")));
        }
        weights[t * width + a] = advantages[t];
    }
    let logp = tape.log(probs)?;
    let weighted = tape.mul(&logp, &Tensor::new(vec![steps, width], weights)?)?;
    let policy = tape.sum(&weighted)?;
    let policy = tape.scale(&policy, -1.0)?;

    let diff = tape.sub(&Tensor::vector(returns.clone()), values)?;
    let sq = tape.mul(&diff, &diff)?;
    let value_sum = tape.sum(&sq)?;

    let plogp = tape.mul(probs, &logp)?;
    let neg_entropy = tape.sum(&plogp)?;

    let scaled_value = tape.scale(&value_sum, coef.value)?;
    let scaled_entropy = tape.scale(&neg_entropy, coef.entropy_beta)?;
    let loss = tape.add(&policy, &scaled_value)?;
    let loss = tape.add(&loss, &scaled_entropy)?;
    Ok(LossOutput {
        policy_loss: policy.item(),
        value_loss: value_sum.item(),
        entropy: -neg_entropy.item(),
        loss,
        returns,
        values: v,
        advantages,
    })
}

fn check_lengths(seg: &RolloutSegment, inputs: usize) -> Result<()> {
    if seg.is_empty() {
        return Err(TrainError::EmptySegment);
    }
    if seg.rewards.len() != seg.len() || inputs != seg.len() {
        return Err(TrainError::Config(format!(
            "segment has {} actions, {} rewards, {} inputs",
            seg.len(),
            seg.rewards.len(),
            inputs
        )));
    }
    Ok(())
}

/// Worker loss over mixed-reward returns.
pub fn worker_loss(
    tape: &mut Tape,
    net: &WorkerNet,
    p: &[Tensor],
    seg: &RolloutSegment,
    coef: LossCoefficients,
) -> Result<LossOutput> {
    let SegmentInputs::Worker { observations, onehots } = &seg.inputs else {
        return Err(TrainError::OwnerMismatch { expected: Owner::Worker, got: seg.owner });
    };
    if seg.owner != Owner::Worker {
        return Err(TrainError::OwnerMismatch { expected: Owner::Worker, got: seg.owner });
    }
    check_lengths(seg, observations.len())?;
    let flat: Vec<f64> = onehots.concat();
    let hots = Tensor::new(vec![seg.len(), net.onehot_width()], flat)?;
    let out = net.unroll(tape, p, observations, &hots, &seg.initial_state)?;
    let returns = nstep_returns(&seg.rewards, seg.bootstrap, seg.gamma)?;
    actor_critic(tape, &out.probs, &out.values, &seg.actions, returns, coef)
}

/// Goal-policy loss over extrinsic-only returns.
pub fn goal_actor_loss(
    tape: &mut Tape,
    gp: &GoalPolicy,
    p: &[Tensor],
    seg: &RolloutSegment,
    coef: LossCoefficients,
) -> Result<LossOutput> {
    let expected = Owner::Goal(gp.kind);
    let SegmentInputs::Goal { observations } = &seg.inputs else {
        return Err(TrainError::OwnerMismatch { expected, got: seg.owner });
    };
    if seg.owner != expected {
        return Err(TrainError::OwnerMismatch { expected, got: seg.owner });
    }
    check_lengths(seg, observations.len())?;
    let out = gp.unroll(tape, p, observations, &seg.initial_state)?;
    let returns = nstep_returns(&seg.rewards, seg.bootstrap, seg.gamma)?;
    actor_critic(tape, &out.probs, &out.values, &seg.actions, returns, coef)
}

/// Runs `loss` on a fresh recording tape and returns one gradient per
/// parameter of `params`, in order.
pub fn gradients<F>(params: &ParamSet, loss: F) -> Result<(Vec<Tensor>, LossOutput)>
where
    F: FnOnce(&mut Tape, &[Tensor]) -> Result<LossOutput>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = loss(&mut tape, &bound)?;
    let grads = tape.backward(&out.loss)?;
    Ok((bound.iter().map(|t| grads.wrt(t)).collect(), out))
}
