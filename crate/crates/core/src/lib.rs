//! Multi-goal hierarchical actor-critic: a Manager made of independent
//! goal-policies issues pixel, direction and feature control subgoals at the
//! same time, and a Worker acts under their summed intrinsic rewards.

pub mod agent;
pub mod tensor;
pub mod trainer;
pub mod envs;
pub mod nets;
pub mod subgoals;
