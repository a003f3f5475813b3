use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ActionSet, EnvError, EnvStep, Environment, Result, Room, AGENT, CHANNELS, INTERACT, ITEMS, MOVE_EAST, MOVE_NORTH, MOVE_SOUTH, MOVE_WEST, TERRAIN};
use crate::tensor::Tensor;

pub const KEY_REWARD: f64 = 100.0;
pub const DOOR_REWARD: f64 = 300.0;
const KEY_VALUE: f64 = 1.0;
const DOOR_VALUE: f64 = 0.5;
const MIN_KEY_DOOR_DISTANCE: usize = 8;

type Cell = (usize, usize);

fn manhattan(a: Cell, b: Cell) -> usize {
    a.0.abs_diff(b.0) + a.1.abs_diff(b.1)
}

/// Single walled room: fetch the key, then open the door with it.
#[derive(Clone, Debug)]
pub struct KeyDoor {
    room: Room,
    step_limit: usize,
    random_layout: bool,
    actions: ActionSet,
    start: Cell,
    key: Cell,
    door: Cell,
    agent: Cell,
    has_key: bool,
    opened: bool,
    steps: usize,
    done: bool,
}

impl KeyDoor {
    pub fn new(size: usize, step_limit: usize, random_layout: bool) -> Self {
        let room = Room::bordered(size);
        let (start, key, door) = Self::fixed_layout(size);
        Self {
            room,
            step_limit,
            random_layout,
            actions: ActionSet::grid(),
            start,
            key,
            door,
            agent: start,
            has_key: false,
            opened: false,
            steps: 0,
            done: true,
        }
    }

    /// Start mid-left, key in the top-left corner, door in the top-right.
    fn fixed_layout(size: usize) -> (Cell, Cell, Cell) {
        let last = size - 2;
        ((size / 2, 1), (1, 1), (1, last))
    }

    fn random_layout(&self, seed: u64) -> (Cell, Cell, Cell) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = self.room.interior_cells();
        loop {
            let key = cells[rng.gen_range(0..cells.len())];
            let door = cells[rng.gen_range(0..cells.len())];
            let start = cells[rng.gen_range(0..cells.len())];
            if manhattan(key, door) >= MIN_KEY_DOOR_DISTANCE && start != key && start != door {
                return (start, key, door);
            }
        }
    }

    pub fn key_cell(&self) -> Cell {
        self.key
    }

    pub fn door_cell(&self) -> Cell {
        self.door
    }

    pub fn agent_cell(&self) -> Cell {
        self.agent
    }

    pub fn has_key(&self) -> bool {
        self.has_key
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn observe(&self) -> Tensor {
        let n = self.room.size;
        let mut data = vec![0.0; CHANNELS * n * n];
        for (i, &w) in self.room.walls.iter().enumerate() {
            if w {
                data[TERRAIN * n * n + i] = 1.0;
            }
        }
        data[self.room.index(AGENT, self.agent)] = 1.0;
        if !self.has_key {
            data[self.room.index(ITEMS, self.key)] = KEY_VALUE;
        }
        data[self.room.index(ITEMS, self.door)] = DOOR_VALUE;
        Tensor::new(vec![CHANNELS, n, n], data).expect("observation shape")
    }
}

impl Environment for KeyDoor {
    fn reset(&mut self, seed: u64) -> Tensor {
        if self.random_layout {
            (self.start, self.key, self.door) = self.random_layout(seed);
        }
        self.agent = self.start;
        self.has_key = false;
        self.opened = false;
        self.steps = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, action: usize) -> Result<EnvStep> {
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        if action >= self.actions.len() {
            return Err(EnvError::UnknownAction(action));
        }
        let mut raw = 0.0;
        if action == INTERACT {
            if !self.has_key && self.agent == self.key {
                self.has_key = true;
                raw = KEY_REWARD;
            } else if self.has_key && self.agent == self.door {
                self.opened = true;
                raw = DOOR_REWARD;
            }
        } else {
            self.agent = self.room.moved(self.agent, action);
        }
        self.steps += 1;
        self.done = self.opened || self.steps >= self.step_limit;
        Ok(EnvStep::new(self.observe(), raw, self.done))
    }

    fn observation_shape(&self) -> [usize; 3] {
        [CHANNELS, self.room.size, self.room.size]
    }

    fn actions(&self) -> &ActionSet {
        &self.actions
    }

    fn succeeded(&self) -> bool {
        self.opened
    }
}

/// Shortest-path policy read off a KeyDoor observation: walk to the key,
/// interact, walk to the door, interact. The room has no interior walls.
pub fn scripted_keydoor_action(obs: &Tensor) -> usize {
    let [_, h, w] = [obs.shape()[0], obs.shape()[1], obs.shape()[2]];
    let plane = |ch: usize| &obs.data()[ch * h * w..(ch + 1) * h * w];
    let find = |ch: usize, v: f64| plane(ch).iter().position(|&x| x == v).map(|i| (i / w, i % w));
    let agent = find(AGENT, 1.0).expect("agent present");
    let target = find(ITEMS, KEY_VALUE)
        .or_else(|| find(ITEMS, DOOR_VALUE))
        .expect("key or door present");
    if agent == target {
        INTERACT
    } else if agent.0 > target.0 {
        MOVE_NORTH
    } else if agent.0 < target.0 {
        MOVE_SOUTH
    } else if agent.1 < target.1 {
        MOVE_EAST
    } else {
        MOVE_WEST
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::REWARD_SCALE;
    use proptest::prelude::*;

    fn item_at(obs: &Tensor, cell: Cell) -> f64 {
        let n = obs.shape()[1];
        obs.data()[(ITEMS * n + cell.0) * n + cell.1]
    }

    #[test]
    fn reset_is_deterministic_and_complete() {
        let mut env = KeyDoor::new(12, 300, false);
        let a = env.reset(1);
        let b = env.reset(1);
        assert_eq!(a, b);
        assert_eq!(item_at(&a, env.key_cell()), KEY_VALUE);
        assert_eq!(item_at(&a, env.door_cell()), DOOR_VALUE);
        assert_eq!(env.agent_cell(), (6, 1));
        assert!(manhattan(env.key_cell(), env.door_cell()) >= MIN_KEY_DOOR_DISTANCE);
        let agents: f64 = a.data()[AGENT * 144..(AGENT + 1) * 144].iter().sum();
        assert_eq!(agents, 1.0);
    }

    #[test]
    fn random_layouts_respect_distance() {
        let mut env = KeyDoor::new(12, 300, true);
        for seed in 0..50 {
            let a = env.reset(seed);
            assert_eq!(a, env.reset(seed));
            assert!(manhattan(env.key_cell(), env.door_cell()) >= MIN_KEY_DOOR_DISTANCE);
        }
    }

    #[test]
    fn key_pickup_scales_reward() {
        let mut env = KeyDoor::new(12, 300, false);
        let mut obs = env.reset(0);
        loop {
            let a = scripted_keydoor_action(&obs);
            let s = env.step(a).unwrap();
            obs = s.obs;
            if a == INTERACT {
                assert_eq!(s.raw_ext_reward, 100.0);
                assert_eq!(s.scaled_ext_reward, 1.0);
                break;
            }
        }
    }

    #[test]
    fn wall_blocks_movement() {
        let mut env = KeyDoor::new(12, 300, false);
        env.reset(0);
        let before = env.agent_cell();
        let s = env.step(MOVE_WEST).unwrap();
        assert_eq!(env.agent_cell(), before);
        assert_eq!(s.raw_ext_reward, 0.0);
    }

    #[test]
    fn step_limit_ends_episode() {
        let mut env = KeyDoor::new(12, 300, false);
        env.reset(0);
        for i in 0..300 {
            let s = env.step(MOVE_WEST).unwrap();
            assert_eq!(s.done, i == 299);
            assert_eq!(s.raw_ext_reward, 0.0);
        }
        assert_eq!(env.step(MOVE_WEST), Err(EnvError::StepAfterDone));
    }

    #[test]
    fn scripted_policy_solves_within_limit() {
        for random_layout in [false, true] {
            let mut env = KeyDoor::new(12, 300, random_layout);
            for seed in 0..20 {
                let mut obs = env.reset(seed);
                let mut total = 0.0;
                loop {
                    let s = env.step(scripted_keydoor_action(&obs)).unwrap();
                    total += s.scaled_ext_reward;
                    obs = s.obs;
                    if s.done {
                        break;
                    }
                }
                assert!(env.succeeded());
                assert_eq!(total, (KEY_REWARD + DOOR_REWARD) / REWARD_SCALE);
                assert!(env.steps() < 60);
            }
        }
    }

    proptest! {
        #[test]
        fn rewards_sparse_and_bounded(actions in proptest::collection::vec(0usize..5, 1..400), seed in 0u64..4) {
            let mut env = KeyDoor::new(12, 300, seed % 2 == 1);
            env.reset(seed);
            let mut total = 0.0;
            let mut nonzero = 0;
            for a in actions {
                let s = env.step(a).unwrap();
                prop_assert!([0.0, 1.0, 3.0].contains(&s.scaled_ext_reward));
                total += s.scaled_ext_reward;
                nonzero += (s.raw_ext_reward != 0.0) as usize;
                if s.done { break; }
            }
            prop_assert!(total <= 4.0);
            prop_assert!(nonzero <= 2);
        }

        #[test]
        fn trajectories_are_reproducible(actions in proptest::collection::vec(0usize..5, 1..100)) {
            let run = || {
                let mut env = KeyDoor::new(12, 300, true);
                let mut out = vec![env.reset(9)];
                for &a in &actions {
                    let s = env.step(a).unwrap();
                    out.push(s.obs);
                    if s.done { break; }
                }
                out
            };
            prop_assert_eq!(run(), run());
        }
    }
}
