use super::*;
use crate::agent::{ablation_set, AgentConfig};
use crate::envs::{Bandit, Collect, KeyDoor};
use crate::nets::{EncoderConfig, GoalPolicy, ParamSet, WorkerNet};
use crate::tensor::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_obs(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()
}

fn randomize(params: &mut ParamSet, r: &mut ChaCha8Rng, scale: f64) {
    for i in 0..params.len() {
        let shape = params.values()[i].shape().to_vec();
        let n = shape.iter().product();
        params.set(i, Tensor::new(shape, (0..n).map(|_| r.gen_range(-scale..scale)).collect()).unwrap());
    }
}

fn small_worker(seed: u64) -> WorkerNet {
    WorkerNet::new(EncoderConfig::desk(3, 8, 8), 8, 14, 5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn worker_segment(r: &mut ChaCha8Rng, steps: usize) -> RolloutSegment {
    RolloutSegment {
        owner: Owner::Worker,
        inputs: SegmentInputs::Worker {
            observations: (0..steps).map(|_| random_obs(r, &[3, 8, 8])).collect(),
            onehots: (0..steps)
                .map(|_| {
                    let mut v = vec![0.0; 14];
                    v[r.gen_range(0..9)] = 1.0;
                    v[9 + r.gen_range(0..5)] = 1.0;
                    v
                })
                .collect(),
        },
        actions: (0..steps).map(|_| r.gen_range(0..5)).collect(),
        rewards: (0..steps).map(|_| r.gen_range(-0.1..1.0)).collect(),
        bootstrap: r.gen_range(-1.0..1.0),
        initial_state: LstmState::zeros(8),
        gamma: 0.99,
    }
}

#[test]
fn nstep_return_examples() {
    let r = nstep_returns(&[0.0, 0.0, 1.0], 0.0, 0.99).unwrap();
    assert!((r[0] - 0.9801).abs() < 1e-15 && (r[1] - 0.99).abs() < 1e-15 && r[2] == 1.0);
    assert!((nstep_returns(&[0.01], 0.5, 0.99).unwrap()[0] - 0.505).abs() < 1e-15);
    assert_eq!(nstep_returns(&[0.0; 4], 0.0, 0.99).unwrap(), vec![0.0; 4]);
    assert_eq!(nstep_returns(&[], 0.0, 0.99), Err(TrainError::EmptySegment));
    assert!(nstep_returns(&[1.0], 0.0, 1.0).is_err());
}

#[test]
fn uniform_policy_entropy_is_ln5() {
    let net = small_worker(0);
    let seg = worker_segment(&mut ChaCha8Rng::seed_from_u64(1), 4);
    let mut tape = Tape::new();
    let p = net.params().bind(&mut tape);
    let out = worker_loss(&mut tape, &net, &p, &seg, LossCoefficients::default()).unwrap();
    assert!((out.entropy / 4.0 - 5f64.ln()).abs() < 1e-12);
}

#[test]
fn entropy_never_exceeds_ln_actions() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..10 {
        let mut net = small_worker(seed);
        randomize(net.params_mut(), &mut r, 0.5);
        let seg = worker_segment(&mut r, 3);
        let mut tape = Tape::no_grad();
        let out = worker_loss(&mut tape, &net, net.params().values(), &seg, LossCoefficients::default()).unwrap();
        assert!(out.entropy / 3.0 <= 5f64.ln() + 1e-12);
    }
}

#[test]
fn zero_advantage_leaves_only_value_and_entropy() {
    let net = small_worker(3);
    let mut seg = worker_segment(&mut ChaCha8Rng::seed_from_u64(4), 3);
    seg.rewards = vec![0.0; 3];
    seg.bootstrap = 0.0;
    let coef = LossCoefficients { value: 0.5, entropy_beta: 0.0 };
    let (grads, out) = gradients(net.params(), |t, p| worker_loss(t, &net, p, &seg, coef)).unwrap();
    assert_eq!(out.advantages, vec![0.0; 3]);
    assert_eq!(out.policy_loss, 0.0);
    assert!(grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn advantage_is_constant_in_policy_term() {
    let mut net = small_worker(5);
    randomize(net.params_mut(), &mut ChaCha8Rng::seed_from_u64(6), 0.3);
    let seg = worker_segment(&mut ChaCha8Rng::seed_from_u64(7), 3);
    let coef = LossCoefficients { value: 0.0, entropy_beta: 0.0 };
    let (grads, out) = gradients(net.params(), |t, p| worker_loss(t, &net, p, &seg, coef)).unwrap();
    assert!(out.advantages.iter().any(|&a| a != 0.0));
    for (name, g) in net.params().names().iter().zip(&grads) {
        if name.starts_with("critic") {
            assert!(g.data().iter().all(|&v| v == 0.0), "{name}");
        }
    }
}

fn goal(kind: SubgoalKind, space: usize, seed: u64) -> GoalPolicy {
    GoalPolicy::new(kind, space, EncoderConfig::desk(3, 8, 8), 8, 5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn goal_segment(kind: SubgoalKind, r: &mut ChaCha8Rng, rewards: Vec<f64>, space: usize) -> RolloutSegment {
    let steps = rewards.len();
    RolloutSegment {
        owner: Owner::Goal(kind),
        inputs: SegmentInputs::Goal {
            observations: (0..steps)
                .map(|_| {
                    let mut prev = vec![0.0; 5];
                    prev[r.gen_range(0..5)] = 1.0;
                    ManagerObservation {
                        observation: random_obs(r, &[3, 8, 8]),
                        prev_extrinsic_reward: r.gen_range(0.0..1.0),
                        prev_action: prev,
                    }
                })
                .collect(),
        },
        actions: (0..steps).map(|_| r.gen_range(0..space)).collect(),
        rewards,
        bootstrap: 0.0,
        initial_state: LstmState::zeros(8),
        gamma: 0.99,
    }
}

#[test]
fn goal_advantage_example() {
    let mut gp = goal(SubgoalKind::DirectionControl, 5, 8);
    gp.params_mut().set_by_name("critic.bias", Tensor::vector(vec![0.4]));
    let seg = goal_segment(SubgoalKind::DirectionControl, &mut ChaCha8Rng::seed_from_u64(9), vec![1.0], 5);
    let mut tape = Tape::no_grad();
    let out = goal_actor_loss(&mut tape, &gp, gp.params().values(), &seg, LossCoefficients::default()).unwrap();
    assert!((out.advantages[0] - 0.6).abs() < 1e-15);

    let zero = goal_segment(SubgoalKind::DirectionControl, &mut ChaCha8Rng::seed_from_u64(9), vec![0.0, 0.0], 5);
    let gp = goal(SubgoalKind::DirectionControl, 5, 8);
    let out = goal_actor_loss(&mut tape, &gp, gp.params().values(), &zero, LossCoefficients::default()).unwrap();
    assert_eq!(out.advantages, vec![0.0, 0.0]);
}

#[test]
fn goal_loss_does_not_reach_other_networks() {
    let a = goal(SubgoalKind::PixelControl, 9, 10);
    let b = goal(SubgoalKind::DirectionControl, 5, 11);
    let w = small_worker(12);
    let seg = goal_segment(SubgoalKind::PixelControl, &mut ChaCha8Rng::seed_from_u64(13), vec![1.0, 0.0, 0.5], 9);
    let mut tape = Tape::new();
    let pa = a.params().bind(&mut tape);
    let pb = b.params().bind(&mut tape);
    let pw = w.params().bind(&mut tape);
    let out = goal_actor_loss(&mut tape, &a, &pa, &seg, LossCoefficients::default()).unwrap();
    let grads = tape.backward(&out.loss).unwrap();
    assert!(pa.iter().any(|t| grads.wrt(t).data().iter().any(|&v| v != 0.0)));
    for t in pb.iter().chain(&pw) {
        assert!(grads.wrt(t).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn owner_mismatch_is_rejected() {
    let gp = goal(SubgoalKind::PixelControl, 9, 14);
    let net = small_worker(15);
    let mut r = ChaCha8Rng::seed_from_u64(16);
    let gseg = goal_segment(SubgoalKind::FeatureControl, &mut r, vec![0.0], 9);
    let wseg = worker_segment(&mut r, 2);
    let mut tape = Tape::no_grad();
    let c = LossCoefficients::default();
    assert!(matches!(goal_actor_loss(&mut tape, &gp, gp.params().values(), &gseg, c), Err(TrainError::OwnerMismatch { .. })));
    assert!(matches!(goal_actor_loss(&mut tape, &gp, gp.params().values(), &wseg, c), Err(TrainError::OwnerMismatch { .. })));
    assert!(matches!(worker_loss(&mut tape, &net, net.params().values(), &gseg, c), Err(TrainError::OwnerMismatch { .. })));
}

/// Plain-arithmetic loss over `[T, A]` probabilities and `[T]` values with
/// the advantages frozen, the way the gradient treats them.
fn frozen_loss(probs: &[f64], values: &[f64], actions: &[usize], returns: &[f64], adv: &[f64], c: LossCoefficients) -> f64 {
    let width = probs.len() / values.len();
    let mut total = 0.0;
    for t in 0..values.len() {
        let row = &probs[t * width..(t + 1) * width];
        total -= row[actions[t]].ln() * adv[t];
        total += c.value * (returns[t] - values[t]).powi(2);
        total += c.entropy_beta * row.iter().map(|p| p * p.ln()).sum::<f64>();
    }
    total
}

/// Central differences on a sample of coordinates of every parameter tensor.
/// `forward` maps parameters to flattened probabilities and values.
fn check_against_finite_differences<F, G>(params: &ParamSet, loss: F, forward: G, seg: &RolloutSegment, r: &mut ChaCha8Rng)
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<LossOutput>,
    G: Fn(&[Tensor]) -> (Vec<f64>, Vec<f64>),
{
    let c = LossCoefficients::default();
    let (grads, out) = gradients(params, &loss).unwrap();
    let returns = nstep_returns(&seg.rewards, seg.bootstrap, seg.gamma).unwrap();
    let (probs, values) = forward(params.values());
    let adv: Vec<f64> = returns.iter().zip(&values).map(|(r, v)| r - v).collect();
    let base = frozen_loss(&probs, &values, &seg.actions, &returns, &adv, c);
    assert!((base - out.loss.item()).abs() < 1e-12 * base.abs().max(1.0));
    let eps = 1e-6;
    for (i, g) in grads.iter().enumerate() {
        for _ in 0..4 {
            let j = r.gen_range(0..g.numel());
            let eval = |delta: f64| {
                let mut p = params.values().to_vec();
                let mut d = p[i].to_vec();
                d[j] += delta;
                p[i] = Tensor::new(p[i].shape().to_vec(), d).unwrap();
                let (probs, values) = forward(&p);
                frozen_loss(&probs, &values, &seg.actions, &returns, &adv, c)
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let analytic = g.data()[j];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
            assert!(rel < 1e-4, "{}[{j}]: {analytic} vs {numeric}", params.names()[i]);
        }
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut r = ChaCha8Rng::seed_from_u64(17);
    let mut net = small_worker(18);
    randomize(net.params_mut(), &mut r, 0.4);
    let seg = worker_segment(&mut r, 3);
    let c = LossCoefficients::default();
    let SegmentInputs::Worker { observations, onehots } = &seg.inputs else { unreachable!() };
    let hots = Tensor::new(vec![3, 14], onehots.concat()).unwrap();
    check_against_finite_differences(
        net.params(),
        |t, p| worker_loss(t, &net, p, &seg, c),
        |p| {
            let out = net.unroll(&mut Tape::no_grad(), p, observations, &hots, &seg.initial_state).unwrap();
            (out.probs.to_vec(), out.values.to_vec())
        },
        &seg,
        &mut r,
    );

    let mut gp = goal(SubgoalKind::FeatureControl, 16, 19);
    randomize(gp.params_mut(), &mut r, 0.4);
    let seg = goal_segment(SubgoalKind::FeatureControl, &mut r, vec![0.0, 1.0, 0.0], 16);
    let SegmentInputs::Goal { observations } = &seg.inputs else { unreachable!() };
    check_against_finite_differences(
        gp.params(),
        |t, p| goal_actor_loss(t, &gp, p, &seg, c),
        |p| {
            let out = gp.unroll(&mut Tape::no_grad(), p, observations, &seg.initial_state).unwrap();
            (out.probs.to_vec(), out.values.to_vec())
        },
        &seg,
        &mut r,
    );
}

#[test]
fn repeated_rewarded_transition_is_monotone() {
    let mut net = WorkerNet::new(EncoderConfig::desk(3, 8, 8), 8, 1, 2, &mut ChaCha8Rng::seed_from_u64(20)).unwrap();
    randomize(net.params_mut(), &mut ChaCha8Rng::seed_from_u64(21), 0.2);
    let store = SharedParamStore::new(
        net.params().iter().map(|(n, t)| (key("worker", n), t.clone())).collect(),
    )
    .unwrap();
    let obs = Tensor::filled(&[3, 8, 8], 0.5);
    let seg = RolloutSegment {
        owner: Owner::Worker,
        inputs: SegmentInputs::Worker { observations: vec![obs.clone()], onehots: vec![vec![1.0]] },
        actions: vec![0],
        rewards: vec![1.0],
        bootstrap: 0.0,
        initial_state: LstmState::zeros(8),
        gamma: 0.99,
    };
    let coef = LossCoefficients { value: 0.5, entropy_beta: 0.0 };
    let opt = RmsProp { learning_rate: 1e-3, ..RmsProp::default() };
    let prob = |net: &WorkerNet| {
        let out = net
            .step(&mut Tape::no_grad(), net.params().values(), &obs, &Tensor::vector(vec![1.0]), &LstmState::zeros(8))
            .unwrap();
        out.probs.data()[0]
    };
    let mut last = prob(&net);
    for _ in 0..200 {
        let (g, _) = gradients(net.params(), |t, p| worker_loss(t, &net, p, &seg, coef)).unwrap();
        let named: Vec<(String, Tensor)> = net.params().names().iter().map(|n| key("worker", n)).zip(g).collect();
        store.apply_gradients(&named, &opt, 40.0).unwrap();
        for i in 0..net.params().len() {
            let name = key("worker", &net.params().names()[i]);
            net.params_mut().set(i, store.get(&name).unwrap());
        }
        let p = prob(&net);
        assert!(p >= last, "{p} < {last}");
        last = p;
    }
    assert!(last > 0.6);
}

fn keydoor_cfg(actors: usize, steps: u64) -> TrainerConfig {
    TrainerConfig {
        num_actors: actors,
        total_steps: steps,
        log_interval: 100,
        record_wallclock: false,
        seed: 3,
        ..TrainerConfig::default()
    }
}

fn agent_cfg() -> AgentConfig {
    AgentConfig {
        active_subgoals: ablation_set(3),
        hidden_units: 16,
        bptt_worker: 30,
        bptt_manager: 10,
        ..AgentConfig::default()
    }
}

fn run_keydoor(cfg: &TrainerConfig, step_limit: usize) -> (TrainSummary, Recorder, Vec<(String, Tensor)>) {
    let mut rec = Recorder::default();
    let (summary, store) = train(
        cfg,
        |i| Agent::new(agent_cfg(), [3, 12, 12], crate::envs::ActionSet::grid(), cfg.seed * 100 + i as u64),
        |_| Ok(Box::new(KeyDoor::new(12, step_limit, false)) as Box<dyn Environment>),
        &mut rec,
    )
    .unwrap();
    (summary, rec, store.snapshot())
}

#[test]
fn single_actor_runs_are_bitwise_reproducible() {
    let cfg = keydoor_cfg(1, 700);
    let (s1, r1, p1) = run_keydoor(&cfg, 60);
    let (s2, r2, p2) = run_keydoor(&cfg, 60);
    assert_eq!(r1.rows, r2.rows);
    assert_eq!(r1.episodes, r2.episodes);
    assert_eq!(p1, p2);
    assert_eq!(s1.global_steps, 700);
    assert_eq!(s1.episodes, s2.episodes);
    assert_eq!(r1.rows.len(), 7);
    assert!(r1.rows.windows(2).all(|w| w[1].global_step - w[0].global_step == 100));
    assert!(r1.rows.iter().all(|r| r.int_return_rand.is_none()));
    assert!(s1.updates > 0);
}

#[test]
fn multi_actor_run_completes() {
    let cfg = keydoor_cfg(3, 900);
    let (s, rec, _) = run_keydoor(&cfg, 50);
    assert_eq!(s.global_steps, 900);
    assert!(rec.episodes.len() >= 12);
    let actors: std::collections::BTreeSet<usize> = rec.episodes.iter().map(|e| e.actor).collect();
    assert_eq!(actors.len(), 3);
}

#[test]
fn failing_actor_aborts_with_diagnostic() {
    let cfg = keydoor_cfg(2, 500);
    let err = train(
        &cfg,
        |i| Agent::new(agent_cfg(), [3, 12, 12], crate::envs::ActionSet::grid(), i as u64),
        |i| {
            if i == 1 {
                Err(EnvError::Config("broken".into()))
            } else {
                Ok(Box::new(KeyDoor::new(12, 50, false)) as Box<dyn Environment>)
            }
        },
        &mut (),
    )
    .unwrap_err();
    assert!(matches!(err, TrainError::Actor { actor: 1, .. }), "{err}");
    assert!(err.to_string().contains("actor 1 failed"));
}

#[test]
fn zero_learning_rate_matches_frozen_policy() {
    let steps = 6000;
    let limit = 30;
    let cfg = TrainerConfig { learning_rate: 0.0, ..keydoor_cfg(1, steps) };
    let make = |seed| Agent::new(agent_cfg(), [3, 12, 12], crate::envs::ActionSet::grid(), seed);
    let mut rec = Recorder::default();
    let (_, store) = train(
        &cfg,
        |_| make(1),
        |_| Ok(Box::new(Collect::new(12, limit, 10)) as Box<dyn Environment>),
        &mut rec,
    )
    .unwrap();
    let initial = SharedParamStore::from_agent(&make(1).unwrap()).unwrap();
    assert_eq!(store.snapshot(), initial.snapshot());

    // independent rollouts of the untrained agent with other seeds
    let mut agent = make(2).unwrap();
    let mut env = Collect::new(12, limit, 10);
    let mut frozen = Vec::new();
    for ep in 0..rec.episodes.len() as u64 {
        agent.reset(env.reset(1000 + ep));
        let mut total = 0.0;
        loop {
            let tr = agent.agent_step(&mut env).unwrap();
            total += tr.ext_reward;
            if tr.done {
                break;
            }
        }
        frozen.push(total);
    }
    let trained: Vec<f64> = rec.episodes.iter().map(|e| e.ext_return_scaled).collect();
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        (m, var / v.len() as f64)
    };
    let (m1, se1) = stats(&trained);
    let (m2, se2) = stats(&frozen);
    assert!((m1 - m2).abs() < 4.0 * (se1 + se2).sqrt(), "{m1} vs {m2}");
}

#[test]
fn bandit_run_through_train_prefers_rewarded_arm() {
    let cfg = TrainerConfig {
        num_actors: 1,
        total_steps: 400,
        log_interval: 100,
        entropy_beta: 0.0,
        learning_rate: 3e-3,
        lr_decay: false,
        record_wallclock: false,
        ..TrainerConfig::default()
    };
    let acfg = AgentConfig { active_subgoals: vec![SubgoalKind::DirectionControl], hidden_units: 8, ..AgentConfig::default() };
    let mut rec = Recorder::default();
    train(
        &cfg,
        |i| Agent::for_env(acfg.clone(), &Bandit::new(2, 1, [3, 8, 8]), i as u64),
        |_| Ok(Box::new(Bandit::new(2, 1, [3, 8, 8])) as Box<dyn Environment>),
        &mut rec,
    )
    .unwrap();
    let late: f64 = rec.episodes[300..].iter().map(|e| e.ext_return_scaled).sum::<f64>() / 100.0;
    let early: f64 = rec.episodes[..100].iter().map(|e| e.ext_return_scaled).sum::<f64>() / 100.0;
    assert!(late > early && late > 0.8, "{early} → {late}");
}

#[test]
fn config_validation_names_fields() {
    assert_eq!(TrainerConfig { num_actors: 0, ..TrainerConfig::default() }.validate().unwrap_err().0, "num_actors");
    assert_eq!(TrainerConfig { entropy_beta: -0.1, ..TrainerConfig::default() }.validate().unwrap_err().0, "entropy_beta");
    assert!(TrainerConfig::default().validate().is_ok());
}

