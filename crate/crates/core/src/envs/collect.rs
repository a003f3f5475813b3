use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ActionSet, EnvError, EnvStep, Environment, Result, Room, AGENT, CHANNELS, ITEMS, TERRAIN};
use crate::tensor::Tensor;

pub const PELLET_REWARD: f64 = 10.0;
/// Steps between terrain re-themes in [`ShiftGrid`].
pub const SCENE_PERIOD: usize = 50;

/// Dense-reward room: walking onto a pellet collects it.
#[derive(Clone, Debug)]
pub struct Collect {
    room: Room,
    step_limit: usize,
    pellet_count: usize,
    actions: ActionSet,
    pellets: Vec<bool>,
    agent: (usize, usize),
    steps: usize,
    done: bool,
    /// Terrain theme; only [`ShiftGrid`] changes it.
    scene: usize,
}

impl Collect {
    pub fn new(size: usize, step_limit: usize, pellets: usize) -> Self {
        Self {
            room: Room::bordered(size),
            step_limit,
            pellet_count: pellets,
            actions: ActionSet::grid(),
            pellets: vec![false; size * size],
            agent: (1, 1),
            steps: 0,
            done: true,
            scene: 0,
        }
    }

    pub fn remaining(&self) -> usize {
        self.pellets.iter().filter(|&&p| p).count()
    }

    pub fn scene(&self) -> usize {
        self.scene
    }

    fn observe(&self) -> Tensor {
        let n = self.room.size;
        let mut data = vec![0.0; CHANNELS * n * n];
        // Wall brightness and a floor checker pattern both depend on the scene.
        let wall = 1.0 - 0.2 * (self.scene % 4) as f64;
        let floor = 0.1 * (self.scene % 3) as f64;
        for r in 0..n {
            for c in 0..n {
                let i = r * n + c;
                data[TERRAIN * n * n + i] = if self.room.walls[i] {
                    wall
                } else if (r + c + self.scene).is_multiple_of(2) {
                    floor
                } else {
                    0.0
                };
                if self.pellets[i] {
                    data[ITEMS * n * n + i] = 1.0;
                }
            }
        }
        data[self.room.index(AGENT, self.agent)] = 1.0;
        Tensor::new(vec![CHANNELS, n, n], data).expect("observation shape")
    }

    fn step_inner(&mut self, action: usize) -> Result<f64> {
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        if action >= self.actions.len() {
            return Err(EnvError::UnknownAction(action));
        }
        self.agent = self.room.moved(self.agent, action);
        let i = self.agent.0 * self.room.size + self.agent.1;
        let raw = if self.pellets[i] {
            self.pellets[i] = false;
            PELLET_REWARD
        } else {
            0.0
        };
        self.steps += 1;
        self.done = self.remaining() == 0 || self.steps >= self.step_limit;
        Ok(raw)
    }
}

impl Environment for Collect {
    fn reset(&mut self, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cells = self.room.interior_cells();
        cells.shuffle(&mut rng);
        self.agent = cells[0];
        self.pellets.iter_mut().for_each(|p| *p = false);
        for &(r, c) in &cells[1..=self.pellet_count] {
            self.pellets[r * self.room.size + c] = true;
        }
        self.steps = 0;
        self.scene = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, action: usize) -> Result<EnvStep> {
        let raw = self.step_inner(action)?;
        Ok(EnvStep::new(self.observe(), raw, self.done))
    }

    fn observation_shape(&self) -> [usize; 3] {
        [CHANNELS, self.room.size, self.room.size]
    }

    fn actions(&self) -> &ActionSet {
        &self.actions
    }

    fn succeeded(&self) -> bool {
        self.remaining() == 0
    }
}

/// [`Collect`] whose terrain channel changes theme every [`SCENE_PERIOD`] steps.
#[derive(Clone, Debug)]
pub struct ShiftGrid {
    inner: Collect,
}

impl ShiftGrid {
    pub fn new(size: usize, step_limit: usize, pellets: usize) -> Self {
        Self {
            inner: Collect::new(size, step_limit, pellets),
        }
    }

    pub fn scene(&self) -> usize {
        self.inner.scene
    }
}

impl Environment for ShiftGrid {
    fn reset(&mut self, seed: u64) -> Tensor {
        self.inner.reset(seed)
    }

    fn step(&mut self, action: usize) -> Result<EnvStep> {
        let raw = self.inner.step_inner(action)?;
        self.inner.scene = self.inner.steps / SCENE_PERIOD;
        Ok(EnvStep::new(self.inner.observe(), raw, self.inner.done))
    }

    fn observation_shape(&self) -> [usize; 3] {
        self.inner.observation_shape()
    }

    fn actions(&self) -> &ActionSet {
        self.inner.actions()
    }

    fn succeeded(&self) -> bool {
        self.inner.succeeded()
    }
}
