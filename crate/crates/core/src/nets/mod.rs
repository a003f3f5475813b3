//! Encoder, recurrent core and actor/critic heads for the Worker and for each
//! Manager goal-policy.
//!
//! Every network owns its own [`ParamSet`]; nothing is shared between the
//! Worker and the goal-policies. Forward passes take the parameters as a
//! bound slice (see [`ParamSet::bind`]) so the same code serves eager
//! rollouts on a no-grad tape and loss replays on a recording tape.

mod layers;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::subgoals::SubgoalKind;
use crate::tensor::{conv_output_hw, Tape, Tensor, TensorError};

pub use layers::{Conv, ConvSpec, Linear, Lstm, LstmState, ParamSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("observation shape {got:?}, expected {expected:?}")]
    ObservationShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("subgoal one-hot block has length {got}, expected {expected}")]
    OneHotLength { expected: usize, got: usize },
    #[error("recurrent input width {got}, expected {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("invalid encoder config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub conv_specs: Vec<ConvSpec>,
    pub fc_units: usize,
    /// `(channels, height, width)`
    pub input_shape: [usize; 3],
}

impl EncoderConfig {
    /// Small-grid preset: 8@3×3/1 then 16@3×3/2, 64 FC units.
    /// On a 12×12 grid the last feature maps are 16×4×4.
    pub fn desk(channels: usize, height: usize, width: usize) -> Self {
        Self {
            conv_specs: vec![
                ConvSpec { filters: 8, kernel: 3, stride: 1 },
                ConvSpec { filters: 16, kernel: 3, stride: 2 },
            ],
            fc_units: 64,
            input_shape: [channels, height, width],
        }
    }

    /// 16@8×8/4 then 32@4×4/2 on 84×84 frames, 256 FC units.
    pub fn atari(channels: usize) -> Self {
        Self {
            conv_specs: vec![
                ConvSpec { filters: 16, kernel: 8, stride: 4 },
                ConvSpec { filters: 32, kernel: 4, stride: 2 },
            ],
            fc_units: 256,
            input_shape: [channels, 84, 84],
        }
    }

    /// Shape `(filters, h, w)` of the last conv layer's output.
    pub fn feature_shape(&self) -> Result<[usize; 3]> {
        let [mut c, mut h, mut w] = self.input_shape;
        if c == 0 || self.conv_specs.is_empty() || self.fc_units == 0 {
            return Err(NetError::Config("need channels, at least one conv layer and fc units".into()));
        }
        for (i, s) in self.conv_specs.iter().enumerate() {
            let (oh, ow) = conv_output_hw(h, w, s.kernel, s.stride).ok_or_else(|| {
                NetError::Config(format!("conv layer {i} ({}x{} stride {}) does not fit {h}x{w}", s.kernel, s.kernel, s.stride))
            })?;
            if s.filters == 0 {
                return Err(NetError::Config(format!("conv layer {i} has no filters")));
            }
            (c, h, w) = (s.filters, oh, ow);
        }
        Ok([c, h, w])
    }
}

/// Output of the encoder for one observation or a `[T, ...]` batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Last conv layer after ReLU: `[F, h, w]` or `[T, F, h, w]`.
    pub features: Tensor,
    /// FC output after ReLU: `[fc]` or `[T, fc]`.
    pub fc: Tensor,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    convs: Vec<Conv>,
    fc: Linear,
    flat: usize,
}

impl Encoder {
    fn new(params: &mut ParamSet, prefix: &str, config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let [fc_c, fc_h, fc_w] = config.feature_shape()?;
        let mut channels = config.input_shape[0];
        let mut convs = Vec::new();
        for (i, spec) in config.conv_specs.iter().enumerate() {
            convs.push(Conv::new(params, &format!("{prefix}.conv{i}"), channels, *spec, rng));
            channels = spec.filters;
        }
        let flat = fc_c * fc_h * fc_w;
        let fc = Linear::new(params, &format!("{prefix}.fc"), flat, config.fc_units, false, rng);
        Ok(Self { config, convs, fc, flat })
    }

    /// Encodes `[C, H, W]` or a batch `[T, C, H, W]`.
    pub fn forward(&self, tape: &mut Tape, p: &[Tensor], obs: &Tensor) -> Result<Encoded> {
        let batched = obs.shape().len() == 4;
        let tail = if batched { &obs.shape()[1..] } else { obs.shape() };
        if tail != self.config.input_shape {
            return Err(NetError::ObservationShape {
                expected: self.config.input_shape.to_vec(),
                got: obs.shape().to_vec(),
            });
        }
        let mut x = obs.clone();
        for conv in &self.convs {
            let y = conv.forward(tape, p, &x)?;
            x = tape.relu(&y)?;
        }
        let flat_shape = if batched { vec![obs.shape()[0], self.flat] } else { vec![self.flat] };
        let flat = tape.reshape(&x, &flat_shape)?;
        let fc = self.fc.forward(tape, p, &flat)?;
        let fc = tape.relu(&fc)?;
        Ok(Encoded { features: x, fc })
    }
}

/// Stacks same-shaped constant tensors into a new leading axis.
pub fn stack(items: &[Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| NetError::Config("cannot stack an empty sequence".into()))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(NetError::ObservationShape {
                expected: first.shape().to_vec(),
                got: t.shape().to_vec(),
            });
        }
        data.extend_from_slice(t.data());
    }
    Ok(Tensor::new(shape, data)?)
}

/// Runs the LSTM over the rows of a `[T, input]` projection and returns the
/// stacked hidden states `[T, H]` plus the final state.
fn unroll_core(
    core: &Lstm,
    tape: &mut Tape,
    p: &[Tensor],
    inputs: &Tensor,
    init: &LstmState,
) -> Result<(Tensor, LstmState)> {
    let steps = inputs.shape()[0];
    let xproj = core.project(tape, p, inputs)?;
    let mut state = init.clone();
    let mut hs = Vec::with_capacity(steps);
    for t in 0..steps {
        let row = tape.slice(&xproj, 0, t, t + 1)?;
        let row = tape.reshape(&row, &[4 * core.hidden])?;
        state = core.cell(tape, p, &row, &state)?;
        hs.push(tape.reshape(&state.h, &[1, core.hidden])?);
    }
    let refs: Vec<&Tensor> = hs.iter().collect();
    let stacked = tape.concat(&refs, 0)?;
    Ok((stacked, state))
}

fn check_width(core: &Lstm, got: usize) -> Result<()> {
    if got != core.input {
        return Err(NetError::WidthMismatch { expected: core.input, got });
    }
    Ok(())
}

/// Actor/critic outputs for a single step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub probs: Tensor,
    pub value: Tensor,
    pub state: LstmState,
    /// Last conv feature maps of the encoder.
    pub features: Tensor,
}

/// Actor/critic outputs over a sequence.
#[derive(Clone, Debug)]
pub struct SequenceOutput {
    /// `[T, A]`
    pub probs: Tensor,
    /// `[T]`
    pub values: Tensor,
    pub state: LstmState,
}

/// Shared encoder → LSTM → (actor, critic) trunk.
#[derive(Clone, Debug)]
struct Trunk {
    encoder: Encoder,
    core: Lstm,
    actor: Linear,
    critic: Linear,
}

impl Trunk {
    fn new(
        params: &mut ParamSet,
        encoder: EncoderConfig,
        extra_inputs: usize,
        hidden: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let encoder = Encoder::new(params, "encoder", encoder, rng)?;
        let core = Lstm::new(params, "lstm", encoder.config.fc_units + extra_inputs, hidden, rng);
        let actor = Linear::new(params, "actor", hidden, outputs, true, rng);
        let critic = Linear::new(params, "critic", hidden, 1, true, rng);
        Ok(Self {
            encoder,
            core,
            actor,
            critic,
        })
    }

    fn heads(&self, tape: &mut Tape, p: &[Tensor], h: &Tensor) -> Result<(Tensor, Tensor)> {
        let logits = self.actor.forward(tape, p, h)?;
        let probs = tape.softmax(&logits)?;
        let value = self.critic.forward(tape, p, h)?;
        Ok((probs, value))
    }

    fn step(&self, tape: &mut Tape, p: &[Tensor], obs: &Tensor, extra: &Tensor, state: &LstmState) -> Result<StepOutput> {
        let enc = self.encoder.forward(tape, p, obs)?;
        self.step_encoded(tape, p, enc, extra, state)
    }

    fn step_encoded(&self, tape: &mut Tape, p: &[Tensor], enc: Encoded, extra: &Tensor, state: &LstmState) -> Result<StepOutput> {
        let x = tape.concat(&[&enc.fc, extra], 0)?;
        check_width(&self.core, x.numel())?;
        let state = self.core.step(tape, p, &x, state)?;
        let (probs, value) = self.heads(tape, p, &state.h)?;
        Ok(StepOutput {
            probs,
            value,
            state,
            features: enc.features,
        })
    }

    fn unroll(&self, tape: &mut Tape, p: &[Tensor], obs: &[Tensor], extra: &Tensor, init: &LstmState) -> Result<SequenceOutput> {
        let batch = stack(obs)?;
        let enc = self.encoder.forward(tape, p, &batch)?;
        let x = tape.concat(&[&enc.fc, extra], 1)?;
        check_width(&self.core, x.shape()[1])?;
        let (hs, state) = unroll_core(&self.core, tape, p, &x, init)?;
        let (probs, values) = self.heads(tape, p, &hs)?;
        let values = tape.reshape(&values, &[obs.len()])?;
        Ok(SequenceOutput { probs, values, state })
    }
}

/// Low-level behaviour policy conditioned on the concatenated subgoal one-hots.
#[derive(Clone, Debug)]
pub struct WorkerNet {
    trunk: Trunk,
    params: ParamSet,
    onehot_width: usize,
    num_actions: usize,
}

impl WorkerNet {
    pub fn new(
        encoder: EncoderConfig,
        hidden: usize,
        onehot_width: usize,
        num_actions: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut params = ParamSet::new();
        let trunk = Trunk::new(&mut params, encoder, onehot_width, hidden, num_actions, rng)?;
        Ok(Self {
            trunk,
            params,
            onehot_width,
            num_actions,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn hidden(&self) -> usize {
        self.trunk.core.hidden
    }

    pub fn onehot_width(&self) -> usize {
        self.onehot_width
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn encoder(&self) -> &Encoder {
        &self.trunk.encoder
    }

    pub fn initial_state(&self) -> LstmState {
        LstmState::zeros(self.hidden())
    }

    /// Encoder pass alone; used for feature-control rewards.
    pub fn features(&self, tape: &mut Tape, p: &[Tensor], obs: &Tensor) -> Result<Tensor> {
        Ok(self.trunk.encoder.forward(tape, p, obs)?.features)
    }

    pub fn encode(&self, tape: &mut Tape, p: &[Tensor], obs: &Tensor) -> Result<Encoded> {
        self.trunk.encoder.forward(tape, p, obs)
    }

    fn check_onehots(&self, onehots: &Tensor) -> Result<()> {
        if onehots.numel() != self.onehot_width {
            return Err(NetError::OneHotLength {
                expected: self.onehot_width,
                got: onehots.numel(),
            });
        }
        Ok(())
    }

    pub fn step(&self, tape: &mut Tape, p: &[Tensor], obs: &Tensor, onehots: &Tensor, state: &LstmState) -> Result<StepOutput> {
        self.check_onehots(onehots)?;
        self.trunk.step(tape, p, obs, onehots, state)
    }

    /// Same as [`WorkerNet::step`] from an observation already passed through [`WorkerNet::encode`].
    pub fn step_encoded(&self, tape: &mut Tape, p: &[Tensor], enc: Encoded, onehots: &Tensor, state: &LstmState) -> Result<StepOutput> {
        self.check_onehots(onehots)?;
        self.trunk.step_encoded(tape, p, enc, onehots, state)
    }

    /// Replays a sequence; `onehots` is `[T, width]`.
    pub fn unroll(&self, tape: &mut Tape, p: &[Tensor], obs: &[Tensor], onehots: &Tensor, init: &LstmState) -> Result<SequenceOutput> {
        if onehots.shape() != [obs.len(), self.onehot_width] {
            return Err(NetError::OneHotLength {
                expected: self.onehot_width,
                got: onehots.shape().last().copied().unwrap_or(0),
            });
        }
        self.trunk.unroll(tape, p, obs, onehots, init)
    }
}

/// Input to a Manager goal-policy: the frame plus previous reward and action.
#[derive(Clone, Debug, PartialEq)]
pub struct ManagerObservation {
    pub observation: Tensor,
    pub prev_extrinsic_reward: f64,
    /// One-hot over environment actions; all zeros at episode start.
    pub prev_action: Vec<f64>,
}

impl ManagerObservation {
    pub fn episode_start(observation: Tensor, num_actions: usize) -> Self {
        Self {
            observation,
            prev_extrinsic_reward: 0.0,
            prev_action: vec![0.0; num_actions],
        }
    }

    fn extra(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(1 + self.prev_action.len());
        v.push(self.prev_extrinsic_reward);
        v.extend_from_slice(&self.prev_action);
        v
    }
}

/// One independent actor-critic of the Manager, dedicated to a subgoal type.
#[derive(Clone, Debug)]
pub struct GoalPolicy {
    pub kind: SubgoalKind,
    trunk: Trunk,
    params: ParamSet,
    space: usize,
    num_actions: usize,
}

impl GoalPolicy {
    pub fn new(
        kind: SubgoalKind,
        space: usize,
        encoder: EncoderConfig,
        hidden: usize,
        num_actions: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut params = ParamSet::new();
        let trunk = Trunk::new(&mut params, encoder, 1 + num_actions, hidden, space, rng)?;
        Ok(Self {
            kind,
            trunk,
            params,
            space,
            num_actions,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn space(&self) -> usize {
        self.space
    }

    pub fn hidden(&self) -> usize {
        self.trunk.core.hidden
    }

    pub fn initial_state(&self) -> LstmState {
        LstmState::zeros(self.hidden())
    }

    fn check(&self, mobs: &ManagerObservation) -> Result<()> {
        if mobs.prev_action.len() != self.num_actions {
            return Err(NetError::WidthMismatch {
                expected: self.num_actions,
                got: mobs.prev_action.len(),
            });
        }
        Ok(())
    }

    pub fn step(&self, tape: &mut Tape, p: &[Tensor], mobs: &ManagerObservation, state: &LstmState) -> Result<StepOutput> {
        self.check(mobs)?;
        let extra = Tensor::vector(mobs.extra());
        self.trunk.step(tape, p, &mobs.observation, &extra, state)
    }

    pub fn unroll(&self, tape: &mut Tape, p: &[Tensor], mobs: &[ManagerObservation], init: &LstmState) -> Result<SequenceOutput> {
        let width = 1 + self.num_actions;
        let mut extra = Vec::with_capacity(mobs.len() * width);
        for m in mobs {
            self.check(m)?;
            extra.extend(m.extra());
        }
        let extra = Tensor::new(vec![mobs.len(), width], extra)?;
        let obs: Vec<Tensor> = mobs.iter().map(|m| m.observation.clone()).collect();
        self.trunk.unroll(tape, p, &obs, &extra, init)
    }
}
