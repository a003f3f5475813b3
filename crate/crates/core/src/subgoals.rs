//! Subgoal types and the intrinsic rewards attached to them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::ActionSet;
use crate::tensor::Tensor;

/// Per-step reward for direction control and for the random subgoal.
pub const DIRECTION_REWARD: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("feature channel {channel} out of range for {channels} channels")]
    BadChannel { channel: usize, channels: usize },
    #[error("random subgoal token {token} out of range for space {space}")]
    TokenOutOfRange { token: usize, space: usize },
    #[error("alpha {0} out of range [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("action {0} has no direction mapping")]
    UnmappedAction(usize),
    #[error("unknown subgoal kind `{0}`")]
    UnknownKind(String),
}

pub type Result<T> = std::result::Result<T, RewardError>;

/// Subgoal families. The derived order is the Worker's one-hot layout order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SubgoalKind {
    #[serde(rename = "pc")]
    PixelControl,
    #[serde(rename = "dc")]
    DirectionControl,
    #[serde(rename = "fc")]
    FeatureControl,
    #[serde(rename = "rand")]
    Random,
}

impl SubgoalKind {
    pub const LAYOUT: [SubgoalKind; 4] = [
        SubgoalKind::PixelControl,
        SubgoalKind::DirectionControl,
        SubgoalKind::FeatureControl,
        SubgoalKind::Random,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            SubgoalKind::PixelControl => "pc",
            SubgoalKind::DirectionControl => "dc",
            SubgoalKind::FeatureControl => "fc",
            SubgoalKind::Random => "rand",
        }
    }

    /// Whether a Manager goal-policy produces this kind (the random one is not learned).
    pub fn is_learned(self) -> bool {
        self != SubgoalKind::Random
    }
}

impl fmt::Display for SubgoalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for SubgoalKind {
    type Err = RewardError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "pc" => Ok(SubgoalKind::PixelControl),
            "dc" => Ok(SubgoalKind::DirectionControl),
            "fc" => Ok(SubgoalKind::FeatureControl),
            "rand" => Ok(SubgoalKind::Random),
            other => Err(RewardError::UnknownKind(other.to_string())),
        }
    }
}

/// Compass directions plus standing still.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    North,
    South,
    East,
    West,
    Still,
}

impl Direction {
    pub const ALL: [Direction; 5] = [
        Direction::North,
        Direction::South,
        Direction::East,
        Direction::West,
        Direction::Still,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// A discrete instruction from the Manager.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Subgoal {
    pub kind: SubgoalKind,
    pub index: usize,
    pub space: usize,
}

impl Subgoal {
    pub fn new(kind: SubgoalKind, index: usize, space: usize) -> Self {
        assert!(index < space, "subgoal index {index} outside space {space}");
        Self { kind, index, space }
    }

    pub fn onehot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.space];
        v[self.index] = 1.0;
        v
    }
}

/// Binary mask over the observation selecting one pixel block (all channels).
#[derive(Clone, Debug)]
pub struct PixelBlockMask {
    pub block_index: usize,
    pub mask: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    /// Scale of pixel and feature control rewards.
    pub eta: f64,
    /// Direction-control and random-subgoal reward.
    pub dc_unit: f64,
    /// Extrinsic share of the Worker reward.
    pub alpha: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            eta: 0.05,
            dc_unit: DIRECTION_REWARD,
            alpha: 0.8,
        }
    }
}

impl RewardWeights {
    /// Returns the offending field name and message.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(("eta", format!("must be positive, got {}", self.eta)));
        }
        if !(self.dc_unit.is_finite() && self.dc_unit >= 0.0) {
            return Err(("dc_unit", format!("must be nonnegative, got {}", self.dc_unit)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(("alpha", format!("out of range [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(RewardError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(())
}

/// `η·‖mask ⊙ (s_t − s_{t−1})‖² / ‖s_t − s_{t−1}‖²`, or 0 for identical frames.
pub fn pixel_control_reward(prev_obs: &Tensor, obs: &Tensor, block: &PixelBlockMask, eta: f64) -> Result<f64> {
    same_shape(prev_obs, obs)?;
    same_shape(obs, &block.mask)?;
    let mut inside = 0.0;
    let mut total = 0.0;
    for ((&a, &b), &m) in obs.data().iter().zip(prev_obs.data()).zip(block.mask.data()) {
        let d = a - b;
        let sq = d * d;
        total += sq;
        inside += m * sq;
    }
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok(eta * (inside / total))
}

/// `unit` when the action moves in the instructed direction, 0 otherwise.
pub fn direction_control_reward(action: usize, subgoal: Direction, actions: &ActionSet, unit: f64) -> Result<f64> {
    let dir = actions
        .direction_of(action)
        .map_err(|_| RewardError::UnmappedAction(action))?;
    Ok(if dir == subgoal { unit } else { 0.0 })
}

/// L2 norm of the change of every channel of a `[C, H, W]` feature stack.
fn channel_change_norms(prev: &Tensor, feats: &Tensor) -> Vec<f64> {
    let channels = feats.shape()[0];
    let per = feats.numel() / channels;
    prev.data()
        .chunks(per)
        .zip(feats.data().chunks(per))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (y - x) * (y - x)).sum::<f64>().sqrt())
        .collect()
}

/// `η·‖Δf_k‖ / Σ_k' ‖Δf_k'‖`, or 0 when no channel changed.
pub fn feature_control_reward(prev_feats: &Tensor, feats: &Tensor, channel: usize, eta: f64) -> Result<f64> {
    same_shape(prev_feats, feats)?;
    let channels = feats.shape()[0];
    if channel >= channels {
        return Err(RewardError::BadChannel { channel, channels });
    }
    let norms = channel_change_norms(prev_feats, feats);
    let total: f64 = norms.iter().sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok(eta * (norms[channel] / total))
}

/// `unit` when the action equals the random token, 0 otherwise.
pub fn random_subgoal_reward(action: usize, token: usize, space: usize, unit: f64) -> Result<f64> {
    if token >= space {
        return Err(RewardError::TokenOutOfRange { token, space });
    }
    Ok(if action == token { unit } else { 0.0 })
}

/// Plain superposition of the active intrinsic rewards.
pub fn compose_intrinsic(components: &[f64]) -> f64 {
    components.iter().sum()
}

/// `((1 − α)/2)·r_int + α·r_ext`, independent of the number of subgoals.
pub fn mix_rewards(r_int: f64, r_ext: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(RewardError::AlphaOutOfRange(alpha));
    }
    Ok((1.0 - alpha) / 2.0 * r_int + alpha * r_ext)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::block_partition;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(v: Vec<f64>) -> Tensor {
        Tensor::new(vec![1, 4, 4], v).unwrap()
    }

    #[test]
    fn pixel_reward_examples() {
        let blocks = block_partition(&[1, 4, 4], 2).unwrap();
        let prev = Tensor::zeros(&[1, 4, 4]);
        let mut v = vec![0.0; 16];
        v[0] = 1.0; // block 0
        let one = grid(v.clone());
        assert_eq!(pixel_control_reward(&prev, &one, &blocks[0], 0.05).unwrap(), 0.05);
        assert_eq!(pixel_control_reward(&prev, &prev, &blocks[0], 0.05).unwrap(), 0.0);
        v[2] = 1.0; // block 1
        let two = grid(v);
        assert!((pixel_control_reward(&prev, &two, &blocks[0], 0.05).unwrap() - 0.025).abs() < 1e-15);
        let bad = Tensor::zeros(&[1, 2, 2]);
        assert!(pixel_control_reward(&prev, &bad, &blocks[0], 0.05).is_err());
    }

    #[test]
    fn direction_reward_examples() {
        let actions = ActionSet::grid();
        let north = actions.action_for(Direction::North).unwrap();
        let south = actions.action_for(Direction::South).unwrap();
        let interact = actions.action_for(Direction::Still).unwrap();
        assert_eq!(direction_control_reward(north, Direction::North, &actions, DIRECTION_REWARD).unwrap(), 0.01);
        assert_eq!(direction_control_reward(south, Direction::North, &actions, DIRECTION_REWARD).unwrap(), 0.0);
        assert_eq!(direction_control_reward(interact, Direction::Still, &actions, DIRECTION_REWARD).unwrap(), 0.01);
        assert_eq!(
            direction_control_reward(9, Direction::Still, &actions, DIRECTION_REWARD),
            Err(RewardError::UnmappedAction(9))
        );
    }

    #[test]
    fn feature_reward_examples() {
        let prev = Tensor::zeros(&[2, 1, 2]);
        let only0 = Tensor::new(vec![2, 1, 2], vec![3.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(feature_control_reward(&prev, &only0, 0, 0.05).unwrap(), 0.05);
        assert_eq!(feature_control_reward(&prev, &prev, 0, 0.05).unwrap(), 0.0);
        // norms (3, 1)
        let both = Tensor::new(vec![2, 1, 2], vec![3.0, 0.0, 0.0, -1.0]).unwrap();
        assert!((feature_control_reward(&prev, &both, 0, 0.05).unwrap() - 0.05 * 0.75).abs() < 1e-15);
        assert_eq!(
            feature_control_reward(&prev, &both, 2, 0.05),
            Err(RewardError::BadChannel { channel: 2, channels: 2 })
        );
    }

    #[test]
    fn random_reward_examples() {
        assert_eq!(random_subgoal_reward(3, 3, 5, DIRECTION_REWARD).unwrap(), 0.01);
        assert_eq!(random_subgoal_reward(2, 3, 5, DIRECTION_REWARD).unwrap(), 0.0);
        assert!(random_subgoal_reward(0, 5, 5, DIRECTION_REWARD).is_err());
    }

    #[test]
    fn random_reward_monte_carlo_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let total: f64 = (0..n)
            .map(|_| {
                let (tok, act) = (rng.gen_range(0..5), rng.gen_range(0..5));
                random_subgoal_reward(act, tok, 5, DIRECTION_REWARD).unwrap()
            })
            .sum();
        let mean = total / n as f64;
        assert!((mean - 0.002).abs() <= 0.002 * 0.05, "mean {mean}");
    }

    #[test]
    fn composition_and_mixing() {
        assert!((compose_intrinsic(&[0.05, 0.01, 0.0]) - 0.06).abs() < 1e-15);
        assert_eq!(compose_intrinsic(&[0.0, 0.0]), 0.0);
        assert_eq!(compose_intrinsic(&[0.05]), 0.05);
        assert!((mix_rewards(0.03, 0.01, 0.8).unwrap() - 0.011).abs() < 1e-15);
        assert_eq!(mix_rewards(0.7, 0.25, 1.0).unwrap(), 0.25);
        assert_eq!(mix_rewards(0.06, 0.0, 0.0).unwrap(), 0.03);
        assert_eq!(mix_rewards(0.0, 0.0, 1.5), Err(RewardError::AlphaOutOfRange(1.5)));
    }

    #[test]
    fn kinds_parse_and_order() {
        assert_eq!("fc".parse::<SubgoalKind>().unwrap(), SubgoalKind::FeatureControl);
        assert!("xx".parse::<SubgoalKind>().is_err());
        let mut v = vec![SubgoalKind::Random, SubgoalKind::FeatureControl, SubgoalKind::PixelControl];
        v.sort();
        assert_eq!(v, vec![SubgoalKind::PixelControl, SubgoalKind::FeatureControl, SubgoalKind::Random]);
        assert_eq!(Subgoal::new(SubgoalKind::DirectionControl, 2, 5).onehot(), vec![0., 0., 1., 0., 0.]);
    }

    fn frames() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (
            proptest::collection::vec(-1.0f64..1.0, 36),
            proptest::collection::vec(-1.0f64..1.0, 36),
        )
    }

    proptest! {
        #[test]
        fn pixel_rewards_partition_eta((a, b) in frames()) {
            let prev = Tensor::new(vec![1, 6, 6], a).unwrap();
            let obs = Tensor::new(vec![1, 6, 6], b).unwrap();
            let blocks = block_partition(&[1, 6, 6], 3).unwrap();
            let rs: Vec<f64> = blocks.iter().map(|m| pixel_control_reward(&prev, &obs, m, 0.05).unwrap()).collect();
            prop_assert!(rs.iter().all(|&r| (0.0..=0.05).contains(&r)));
            prop_assert!((rs.iter().sum::<f64>() - 0.05).abs() < 1e-15);
        }

        #[test]
        fn feature_rewards_partition_eta((a, b) in frames()) {
            let prev = Tensor::new(vec![4, 3, 3], a).unwrap();
            let feats = Tensor::new(vec![4, 3, 3], b).unwrap();
            let rs: Vec<f64> = (0..4).map(|k| feature_control_reward(&prev, &feats, k, 0.05).unwrap()).collect();
            prop_assert!(rs.iter().all(|&r| (0.0..=0.05).contains(&r)));
            prop_assert!((rs.iter().sum::<f64>() - 0.05).abs() < 1e-15);
        }

        #[test]
        fn pixel_reward_invariant_to_permutation_within_block((a, b) in frames(), swap in 0usize..3) {
            let blocks = block_partition(&[1, 6, 6], 3).unwrap();
            let prev = Tensor::new(vec![1, 6, 6], a.clone()).unwrap();
            let obs = Tensor::new(vec![1, 6, 6], b.clone()).unwrap();
            // swap two cells of block 0 (rows 0..3, cols 0..3) consistently in both frames
            let (i, j) = (swap, 6 + (swap + 1) % 3);
            let (mut a2, mut b2) = (a, b);
            a2.swap(i, j);
            b2.swap(i, j);
            let prev2 = Tensor::new(vec![1, 6, 6], a2).unwrap();
            let obs2 = Tensor::new(vec![1, 6, 6], b2).unwrap();
            for m in &blocks {
                let r1 = pixel_control_reward(&prev, &obs, m, 0.05).unwrap();
                let r2 = pixel_control_reward(&prev2, &obs2, m, 0.05).unwrap();
                prop_assert!((r1 - r2).abs() < 1e-15);
            }
        }

        #[test]
        fn composition_is_order_free(v in proptest::collection::vec(0.0f64..0.1, 1..5)) {
            let mut r = v.clone();
            r.reverse();
            prop_assert!((compose_intrinsic(&v) - compose_intrinsic(&r)).abs() < 1e-15);
        }
    }
}
