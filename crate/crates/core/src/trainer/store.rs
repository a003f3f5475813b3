use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::agent::Agent;
use crate::tensor::Tensor;

/// Shared RMSProp settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
}

impl Default for RmsProp {
    fn default() -> Self {
        Self {
            learning_rate: 7e-4,
            decay: 0.99,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug)]
struct Slot {
    value: Tensor,
    sq_avg: Vec<f64>,
}

/// Global parameters of every network, keyed `group/param`, each behind its
/// own lock together with its squared-gradient average.
#[derive(Debug)]
pub struct SharedParamStore {
    names: Vec<String>,
    index: HashMap<String, usize>,
    slots: Vec<Mutex<Slot>>,
    steps: AtomicU64,
    updates: AtomicU64,
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            let data = g.data().iter().map(|v| v * scale).collect();
            *g = Tensor::new(g.shape().to_vec(), data).expect("same shape");
        }
    }
    norm
}

pub fn key(group: &str, name: &str) -> String {
    format!("{group}/{name}")
}

impl SharedParamStore {
    pub fn new(named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut index = HashMap::new();
        let mut names = Vec::with_capacity(named.len());
        let mut slots = Vec::with_capacity(named.len());
        for (name, value) in named {
            if index.insert(name.clone(), names.len()).is_some() {
                return Err(TrainError::DuplicateParam(name));
            }
            names.push(name);
            slots.push(Mutex::new(Slot {
                sq_avg: vec![0.0; value.numel()],
                value: value.detach(),
            }));
        }
        Ok(Self {
            names,
            index,
            slots,
            steps: AtomicU64::new(0),
            updates: AtomicU64::new(0),
        })
    }

    pub fn from_agent(agent: &Agent) -> Result<Self> {
        let mut named = Vec::new();
        for (group, params) in agent.param_groups() {
            for (name, value) in params.iter() {
                named.push((key(&group, name), value.clone()));
            }
        }
        Self::new(named)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    fn slot(&self, name: &str) -> Result<&Mutex<Slot>> {
        self.index
            .get(name)
            .map(|&i| &self.slots[i])
            .ok_or_else(|| TrainError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        Ok(self.slot(name)?.lock().expect("param lock").value.clone())
    }

    /// Replaces a tensor (shape must match) and clears its optimizer state.
    pub fn set(&self, name: &str, value: Tensor) -> Result<()> {
        let mut slot = self.slot(name)?.lock().expect("param lock");
        if slot.value.shape() != value.shape() {
            return Err(TrainError::ShapeMismatch {
                name: name.to_string(),
                expected: slot.value.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        slot.value = value.detach();
        slot.sq_avg.iter_mut().for_each(|v| *v = 0.0);
        Ok(())
    }

    /// Every tensor, each read under its own lock.
    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .zip(&self.slots)
            .map(|(n, s)| (n.clone(), s.lock().expect("param lock").value.clone()))
            .collect()
    }

    /// Copies the current values of `groups` (all groups when `None`) into the agent.
    pub fn load_into(&self, agent: &mut Agent, groups: Option<&[&str]>) -> Result<()> {
        if groups.is_none_or(|g| g.contains(&"worker")) {
            agent.invalidate();
        }
        for (group, params) in agent.param_groups_mut() {
            if groups.is_some_and(|g| !g.contains(&group.as_str())) {
                continue;
            }
            for i in 0..params.len() {
                let name = key(&group, &params.names()[i]);
                params.set(i, self.get(&name)?);
            }
        }
        Ok(())
    }

    pub fn global_step(&self) -> u64 {
        self.steps.load(Ordering::SeqCst)
    }

    /// Claims the next environment step unless `limit` is reached.
    pub fn claim_step(&self, limit: u64) -> Option<u64> {
        self.steps
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |s| (s < limit).then_some(s + 1))
            .ok()
            .map(|s| s + 1)
    }

    pub fn updates_applied(&self) -> u64 {
        self.updates.load(Ordering::SeqCst)
    }

    /// Clips `grads` to global norm `clip`, then applies one RMSProp step per
    /// tensor. Tensors whose gradient is exactly zero are left untouched.
    /// Names are checked before anything is written. Returns the update count.
    pub fn apply_gradients(&self, grads: &[(String, Tensor)], opt: &RmsProp, clip: f64) -> Result<u64> {
        let mut slots = Vec::with_capacity(grads.len());
        for (name, g) in grads {
            let slot = self.slot(name)?;
            let shape = slot.lock().expect("param lock").value.shape().to_vec();
            if shape != g.shape() {
                return Err(TrainError::ShapeMismatch {
                    name: name.clone(),
                    expected: shape,
                    got: g.shape().to_vec(),
                });
            }
            slots.push(slot);
        }
        let mut tensors: Vec<Tensor> = grads.iter().map(|(_, g)| g.clone()).collect();
        clip_global_norm(&mut tensors, clip);
        for (slot, g) in slots.into_iter().zip(&tensors) {
            if g.data().iter().all(|&v| v == 0.0) {
                continue;
            }
            let mut slot = slot.lock().expect("param lock");
            let Slot { value, sq_avg } = &mut *slot;
            let mut data = value.to_vec();
            for ((w, s), &gi) in data.iter_mut().zip(sq_avg.iter_mut()).zip(g.data()) {
                *s = opt.decay * *s + (1.0 - opt.decay) * gi * gi;
                *w -= opt.learning_rate * gi / (s.sqrt() + opt.epsilon);
            }
            *value = Tensor::new(value.shape().to_vec(), data).expect("same shape");
        }
        Ok(self.updates.fetch_add(1, Ordering::SeqCst) + 1)
    }
}
