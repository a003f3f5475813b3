use super::{ActionSet, EnvError, EnvStep, Environment, Result, REWARD_SCALE};
use crate::subgoals::Direction;
use crate::tensor::Tensor;

/// One-step episodes with a constant observation; only `rewarded` pays
/// (scaled reward 1).
#[derive(Clone, Debug)]
pub struct Bandit {
    shape: [usize; 3],
    rewarded: usize,
    actions: ActionSet,
    done: bool,
    won: bool,
}

impl Bandit {
    pub fn new(arms: usize, rewarded: usize, shape: [usize; 3]) -> Self {
        assert!(rewarded < arms, "rewarded arm {rewarded} outside {arms} arms");
        Self {
            shape,
            rewarded,
            actions: ActionSet::new(vec![Direction::Still; arms]),
            done: true,
            won: false,
        }
    }

    fn observe(&self) -> Tensor {
        Tensor::filled(&self.shape, 0.5)
    }
}

impl Environment for Bandit {
    fn reset(&mut self, _seed: u64) -> Tensor {
        self.done = false;
        self.won = false;
        self.observe()
    }

    fn step(&mut self, action: usize) -> Result<EnvStep> {
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        if action >= self.actions.len() {
            return Err(EnvError::UnknownAction(action));
        }
        self.done = true;
        self.won = action == self.rewarded;
        let raw = if self.won { REWARD_SCALE } else { 0.0 };
        Ok(EnvStep::new(self.observe(), raw, true))
    }

    fn observation_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn actions(&self) -> &ActionSet {
        &self.actions
    }

    fn succeeded(&self) -> bool {
        self.won
    }
}
