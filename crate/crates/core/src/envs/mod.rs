//! Small grid worlds with image-like observations.
//!
//! Observations are `3 × H × W` grids with values in `[0, 1]`:
//! channel 0 terrain, channel 1 agent, channel 2 items.
//!
//! * [`KeyDoor`]: sparse. Pick up the key (raw 100), then open the door (raw 300).
//! * [`Collect`]: dense. Pellets worth raw 10 each.
//! * [`ShiftGrid`]: `Collect` whose terrain re-themes every 50 steps.

mod bandit;
mod collect;
mod keydoor;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::subgoals::{Direction, PixelBlockMask};
use crate::tensor::Tensor;

pub use bandit::Bandit;
pub use collect::{Collect, ShiftGrid, SCENE_PERIOD};
pub use keydoor::{scripted_keydoor_action, KeyDoor};

/// Extrinsic rewards are divided by this before the agent sees them.
pub const REWARD_SCALE: f64 = 100.0;

pub const CHANNELS: usize = 3;
pub const TERRAIN: usize = 0;
pub const AGENT: usize = 1;
pub const ITEMS: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("step called after the episode ended; call reset")]
    StepAfterDone,
    #[error("unknown action {0}")]
    UnknownAction(usize),
    #[error("observation {h}x{w} is not divisible into {block}x{block} blocks")]
    Indivisible { h: usize, w: usize, block: usize },
    #[error("unknown environment `{0}` (expected keydoor, collect or shiftgrid)")]
    UnknownEnv(String),
    #[error("invalid environment config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, EnvError>;

pub const MOVE_NORTH: usize = 0;
pub const MOVE_SOUTH: usize = 1;
pub const MOVE_EAST: usize = 2;
pub const MOVE_WEST: usize = 3;
pub const INTERACT: usize = 4;

/// The five grid actions and their direction mapping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionSet {
    directions: Vec<Direction>,
}

impl ActionSet {
    pub fn grid() -> Self {
        Self {
            directions: vec![
                Direction::North,
                Direction::South,
                Direction::East,
                Direction::West,
                Direction::Still,
            ],
        }
    }

    /// Arbitrary action set; `directions[a]` is what direction control sees for action `a`.
    pub fn new(directions: Vec<Direction>) -> Self {
        Self { directions }
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn direction_of(&self, action: usize) -> Result<Direction> {
        self.directions
            .get(action)
            .copied()
            .ok_or(EnvError::UnknownAction(action))
    }

    pub fn action_for(&self, dir: Direction) -> Option<usize> {
        self.directions.iter().position(|&d| d == dir)
    }
}

/// Result of one environment tick.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvStep {
    pub obs: Tensor,
    pub raw_ext_reward: f64,
    pub scaled_ext_reward: f64,
    pub done: bool,
}

impl EnvStep {
    pub fn new(obs: Tensor, raw: f64, done: bool) -> Self {
        Self {
            obs,
            raw_ext_reward: raw,
            scaled_ext_reward: raw / REWARD_SCALE,
            done,
        }
    }
}

pub trait Environment: Send {
    fn reset(&mut self, seed: u64) -> Tensor;
    fn step(&mut self, action: usize) -> Result<EnvStep>;
    fn observation_shape(&self) -> [usize; 3];
    fn actions(&self) -> &ActionSet;
    /// Task-specific success (door opened, all pellets collected).
    fn succeeded(&self) -> bool;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    KeyDoor,
    Collect,
    ShiftGrid,
}

impl FromStr for EnvKind {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keydoor" => Ok(EnvKind::KeyDoor),
            "collect" => Ok(EnvKind::Collect),
            "shiftgrid" => Ok(EnvKind::ShiftGrid),
            other => Err(EnvError::UnknownEnv(other.to_string())),
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvKind::KeyDoor => "keydoor",
            EnvKind::Collect => "collect",
            EnvKind::ShiftGrid => "shiftgrid",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub name: EnvKind,
    pub size: usize,
    pub step_limit: usize,
    pub seed: u64,
    /// KeyDoor only: draw key/door/start positions from the reset seed.
    pub random_layout: bool,
    /// Collect/ShiftGrid only.
    pub pellets: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            name: EnvKind::KeyDoor,
            size: 12,
            step_limit: 300,
            seed: 0,
            random_layout: false,
            pellets: 10,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.size < 8 {
            return Err(("size", format!("must be at least 8, got {}", self.size)));
        }
        if self.step_limit == 0 {
            return Err(("step_limit", "must be positive".into()));
        }
        let interior = (self.size - 2) * (self.size - 2);
        if self.name != EnvKind::KeyDoor && (self.pellets == 0 || self.pellets >= interior) {
            return Err(("pellets", format!("must be in 1..{interior}, got {}", self.pellets)));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn Environment>> {
        self.validate()
            .map_err(|(field, msg)| EnvError::Config(format!("{field}: {msg}")))?;
        Ok(match self.name {
            EnvKind::KeyDoor => Box::new(KeyDoor::new(self.size, self.step_limit, self.random_layout)),
            EnvKind::Collect => Box::new(Collect::new(self.size, self.step_limit, self.pellets)),
            EnvKind::ShiftGrid => Box::new(ShiftGrid::new(self.size, self.step_limit, self.pellets)),
        })
    }
}

/// Splits the spatial extent of `obs_shape` (`[C, H, W]` or `[H, W]`) into
/// square blocks, numbered row-major. Each mask covers all channels.
pub fn block_partition(obs_shape: &[usize], block: usize) -> Result<Vec<PixelBlockMask>> {
    let (c, h, w) = match *obs_shape {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(EnvError::Config(format!("observation shape {obs_shape:?}"))),
    };
    if block == 0 || h % block != 0 || w % block != 0 {
        return Err(EnvError::Indivisible { h, w, block });
    }
    let (bh, bw) = (h / block, w / block);
    let mut masks = Vec::with_capacity(bh * bw);
    for by in 0..bh {
        for bx in 0..bw {
            let mut data = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in by * block..(by + 1) * block {
                    for x in bx * block..(bx + 1) * block {
                        data[(ch * h + y) * w + x] = 1.0;
                    }
                }
            }
            masks.push(PixelBlockMask {
                block_index: masks.len(),
                mask: Tensor::new(obs_shape.to_vec(), data).expect("mask shape"),
            });
        }
    }
    Ok(masks)
}

/// Cell grid with border walls shared by the environments.
#[derive(Clone, Debug)]
pub(crate) struct Room {
    pub size: usize,
    pub walls: Vec<bool>,
}

impl Room {
    pub fn bordered(size: usize) -> Self {
        let mut walls = vec![false; size * size];
        for i in 0..size {
            walls[i] = true;
            walls[(size - 1) * size + i] = true;
            walls[i * size] = true;
            walls[i * size + size - 1] = true;
        }
        Self { size, walls }
    }

    pub fn is_wall(&self, (r, c): (usize, usize)) -> bool {
        self.walls[r * self.size + c]
    }

    /// Target cell of a move, or the same cell when blocked or not a move.
    pub fn moved(&self, pos: (usize, usize), action: usize) -> (usize, usize) {
        let (r, c) = pos;
        let next = match action {
            MOVE_NORTH => (r.wrapping_sub(1), c),
            MOVE_SOUTH => (r + 1, c),
            MOVE_EAST => (r, c + 1),
            MOVE_WEST => (r, c.wrapping_sub(1)),
            _ => return pos,
        };
        if next.0 >= self.size || next.1 >= self.size || self.is_wall(next) {
            pos
        } else {
            next
        }
    }

    pub fn interior_cells(&self) -> Vec<(usize, usize)> {
        (0..self.size * self.size)
            .filter(|&i| !self.walls[i])
            .map(|i| (i / self.size, i % self.size))
            .collect()
    }

    pub fn index(&self, ch: usize, (r, c): (usize, usize)) -> usize {
        (ch * self.size + r) * self.size + c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_partition_counts_and_cover() {
        assert_eq!(block_partition(&[84, 84], 14).unwrap().len(), 36);
        let masks = block_partition(&[3, 12, 12], 4).unwrap();
        assert_eq!(masks.len(), 9);
        let mut cover = vec![0.0; 3 * 144];
        for m in &masks {
            for (c, v) in cover.iter_mut().zip(m.mask.data()) {
                *c += v;
            }
        }
        assert!(cover.iter().all(|&v| v == 1.0), "masks must be disjoint and cover");
        assert_eq!(
            block_partition(&[3, 12, 12], 5).unwrap_err(),
            EnvError::Indivisible { h: 12, w: 12, block: 5 }
        );
    }

    #[test]
    fn direction_mapping_is_total() {
        let a = ActionSet::grid();
        assert_eq!(a.direction_of(MOVE_NORTH).unwrap(), Direction::North);
        assert_eq!(a.direction_of(INTERACT).unwrap(), Direction::Still);
        assert_eq!((0..5).filter_map(|i| a.direction_of(i).ok()).count(), 5);
        assert_eq!(a.direction_of(5), Err(EnvError::UnknownAction(5)));
    }

    #[test]
    fn env_names_parse() {
        assert_eq!("shiftgrid".parse::<EnvKind>().unwrap(), EnvKind::ShiftGrid);
        assert!("pong".parse::<EnvKind>().is_err());
    }
}
