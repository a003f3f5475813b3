use super::*;
use crate::envs::{KeyDoor, MOVE_NORTH, INTERACT};
use crate::subgoals::DIRECTION_REWARD;
use proptest::prelude::*;
use rand::Rng;

use SubgoalKind::*;

fn config(kinds: Vec<SubgoalKind>) -> AgentConfig {
    AgentConfig {
        active_subgoals: kinds,
        hidden_units: 16,
        ..AgentConfig::default()
    }
}

fn keydoor_agent(kinds: Vec<SubgoalKind>, seed: u64) -> (Agent, KeyDoor) {
    let mut env = KeyDoor::new(12, 300, false);
    let agent = Agent::for_env(config(kinds), &env, seed).unwrap();
    let _ = env.reset(0);
    (agent, env)
}

/// Brute-force pixel-control oracle: loops over cells of one block.
fn pc_oracle(prev: &Tensor, obs: &Tensor, block: usize, size: usize, eta: f64) -> f64 {
    let (c, h, w) = (obs.shape()[0], obs.shape()[1], obs.shape()[2]);
    let per_row = w / size;
    let (by, bx) = (block / per_row, block % per_row);
    let mut inside = 0.0;
    let mut total = 0.0;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let i = (ch * h + y) * w + x;
                let d = (obs.data()[i] - prev.data()[i]).powi(2);
                total += d;
                if y / size == by && x / size == bx {
                    inside += d;
                }
            }
        }
    }
    if total == 0.0 { 0.0 } else { eta * inside / total }
}

fn fc_oracle(prev: &Tensor, feats: &Tensor, k: usize, eta: f64) -> f64 {
    let per = feats.numel() / feats.shape()[0];
    let norm = |c: usize| {
        (0..per)
            .map(|i| (feats.data()[c * per + i] - prev.data()[c * per + i]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let total: f64 = (0..feats.shape()[0]).map(norm).sum();
    if total == 0.0 { 0.0 } else { eta * norm(k) / total }
}

#[test]
fn encode_layout_example() {
    let layout = SubgoalLayout::new(vec![(PixelControl, 9), (DirectionControl, 5), (FeatureControl, 16)]).unwrap();
    let v = encode_subgoals(
        &[
            Subgoal::new(PixelControl, 3, 9),
            Subgoal::new(DirectionControl, 0, 5),
            Subgoal::new(FeatureControl, 1, 16),
        ],
        &layout,
    )
    .unwrap();
    assert_eq!(v.len(), 30);
    let ones: Vec<usize> = v.iter().enumerate().filter(|e| *e.1 == 1.0).map(|e| e.0).collect();
    assert_eq!(ones, vec![3, 9, 15]);

    let single = SubgoalLayout::new(vec![(PixelControl, 9)]).unwrap();
    assert_eq!(encode_subgoals(&[Subgoal::new(PixelControl, 4, 9)], &single).unwrap().len(), 9);
    assert!(encode_subgoals(&[Subgoal::new(DirectionControl, 0, 5)], &single).is_err());
    assert!(encode_subgoals(&[], &single).is_err());
    assert!(SubgoalLayout::new(vec![(FeatureControl, 16), (PixelControl, 9)]).is_err());
}

#[test]
fn layout_independent_of_listing_order() {
    let env = KeyDoor::new(12, 300, false);
    let a = Agent::for_env(config(vec![FeatureControl, PixelControl, DirectionControl]), &env, 0).unwrap();
    let b = Agent::for_env(config(vec![DirectionControl, PixelControl, FeatureControl]), &env, 1).unwrap();
    assert_eq!(a.layout(), b.layout());
    assert_eq!(a.layout().entries(), &[(PixelControl, 9), (DirectionControl, 5), (FeatureControl, 16)]);
    let r = Agent::for_env(config(ablation_set(4)), &env, 0).unwrap();
    assert_eq!(r.layout().space(Random), Some(5));
    assert_eq!(r.goal_policies().len(), 3);
}

#[test]
fn config_validation() {
    let env = KeyDoor::new(12, 300, false);
    for bad in [
        config(vec![]),
        config(vec![PixelControl, PixelControl]),
        AgentConfig { refresh_interval: 0, ..config(vec![PixelControl]) },
        AgentConfig { gamma: 1.0, ..config(vec![PixelControl]) },
    ] {
        assert!(matches!(Agent::for_env(bad, &env, 0), Err(AgentError::Config { .. })));
    }
}

#[test]
fn select_subgoals_one_per_kind() {
    let (mut agent, mut env) = keydoor_agent(ablation_set(3), 0);
    agent.reset(env.reset(0));
    let d = agent.select_subgoals().unwrap();
    let kinds: Vec<SubgoalKind> = d.subgoals.iter().map(|g| g.kind).collect();
    assert_eq!(kinds, vec![PixelControl, DirectionControl, FeatureControl]);
    assert_eq!(d.values.len(), 3);

    let (mut agent, mut env) = keydoor_agent(ablation_set(4), 0);
    agent.reset(env.reset(0));
    let d = agent.select_subgoals().unwrap();
    assert_eq!(d.subgoals.len(), 4);
    assert_eq!(d.subgoals[3].kind, Random);
    assert_eq!(d.subgoals[3].space, 5);
}

#[test]
fn random_subgoal_is_uniform() {
    let (mut agent, mut env) = keydoor_agent(vec![Random], 3);
    agent.reset(env.reset(0));
    let mut counts = [0usize; 5];
    let n = 20_000;
    for _ in 0..n {
        counts[agent.select_subgoals().unwrap().subgoals[0].index] += 1;
    }
    for c in counts {
        assert!((c as f64 / n as f64 - 0.2).abs() < 0.015, "{counts:?}");
    }
}

#[test]
fn greedy_mode_takes_argmax() {
    let (mut agent, mut env) = keydoor_agent(ablation_set(3), 4);
    // perturb the goal-policy heads so argmax is not the first index
    let mut r = ChaCha8Rng::seed_from_u64(9);
    for (_, ps) in agent.param_groups_mut() {
        for i in 0..ps.len() {
            let t = &ps.values()[i];
            let data = t.data().iter().map(|v| v + r.gen_range(-0.3..0.3)).collect();
            ps.set(i, Tensor::new(t.shape().to_vec(), data).unwrap());
        }
    }
    agent.set_greedy(true);
    let obs = env.reset(0);
    agent.reset(obs.clone());
    let mobs = ManagerObservation::episode_start(obs, 5);
    let d = agent.select_subgoals().unwrap();
    for (g, gp) in d.subgoals.iter().zip(agent.goal_policies()) {
        let out = gp
            .step(&mut Tape::no_grad(), gp.params().values(), &mobs, &gp.initial_state())
            .unwrap();
        let p = out.probs.data();
        let best = (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b });
        assert_eq!(g.index, best);
    }
}

#[test]
fn sampling_frequencies_and_log_probs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let probs = [0.2; 5];
    let mut counts = [0usize; 5];
    let n = 100_000;
    for _ in 0..n {
        let (a, lp) = sample_action(&probs, &mut rng, false);
        assert!((lp - 0.2f64.ln()).abs() < 1e-12);
        counts[a] += 1;
    }
    for c in counts {
        assert!((c as f64 / n as f64 - 0.2).abs() < 0.01);
    }
    let skewed = [0.1, 0.6, 0.3];
    assert_eq!(sample_action(&skewed, &mut rng, true), (1, 0.6f64.ln()));
    for _ in 0..100 {
        let (a, lp) = sample_action(&skewed, &mut rng, false);
        assert_eq!(lp, skewed[a].ln());
    }
}

#[test]
fn act_reports_consistent_log_prob() {
    let (agent, mut env) = keydoor_agent(ablation_set(3), 5);
    let obs = env.reset(0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut onehots = vec![0.0; 30];
    onehots[0] = 1.0;
    onehots[9] = 1.0;
    onehots[14] = 1.0;
    let a = act(agent.worker(), &obs, &onehots, &agent.worker().initial_state(), &mut rng, false).unwrap();
    assert!((a.log_prob - a.probs[a.action].ln()).abs() < 1e-12);
    assert_eq!(a.value, 0.0);
    assert!(act(agent.worker(), &obs, &onehots[..29], &agent.worker().initial_state(), &mut rng, false).is_err());
}

#[test]
fn matching_direction_and_block_sum_components() {
    let (mut agent, mut env) = keydoor_agent(ablation_set(3), 6);
    agent.reset(env.reset(0));
    // start (6, 1) → (5, 1): both cells in block row 1, column 0 = block 3
    agent
        .set_subgoals(vec![
            Subgoal::new(PixelControl, 3, 9),
            Subgoal::new(DirectionControl, Direction::North.index(), 5),
            Subgoal::new(FeatureControl, 2, 16),
        ])
        .unwrap();
    agent.set_greedy(true);
    // zero heads: greedy picks action 0 = north
    let tr = agent.agent_step(&mut env).unwrap();
    assert_eq!(tr.action, MOVE_NORTH);
    assert_eq!(tr.intrinsic_of(PixelControl), Some(0.05));
    assert_eq!(tr.intrinsic_of(DirectionControl), Some(DIRECTION_REWARD));
    let (f0, f1) = tr.features.clone().unwrap();
    let fc = fc_oracle(&f0, &f1, 2, 0.05);
    assert!((tr.intrinsic_total - (0.01 + 0.05 + fc)).abs() < 1e-15);
    assert_eq!(tr.mixed_reward, mix_rewards(compose_intrinsic(&[0.05, 0.01, tr.intrinsic_of(FeatureControl).unwrap()]), 0.0, 0.8).unwrap());
}

#[test]
fn standing_still_rewards_only_still_direction() {
    for (dir, expect) in [(Direction::Still, DIRECTION_REWARD), (Direction::East, 0.0)] {
        let (mut agent, mut env) = keydoor_agent(ablation_set(3), 7);
        for (name, ps) in agent.param_groups_mut() {
            if name == "worker" {
                ps.set_by_name("actor.bias", Tensor::vector(vec![0.0, 0.0, 0.0, 0.0, 10.0]));
            }
        }
        agent.set_greedy(true);
        agent.reset(env.reset(0));
        agent
            .set_subgoals(vec![
                Subgoal::new(PixelControl, 3, 9),
                Subgoal::new(DirectionControl, dir.index(), 5),
                Subgoal::new(FeatureControl, 0, 16),
            ])
            .unwrap();
        // interacting away from the key leaves the frame unchanged
        let tr = agent.agent_step(&mut env).unwrap();
        assert_eq!(tr.action, INTERACT);
        assert_eq!(tr.obs, tr.next_obs);
        assert_eq!(tr.intrinsic_of(PixelControl), Some(0.0));
        assert_eq!(tr.intrinsic_of(FeatureControl), Some(0.0));
        assert_eq!(tr.intrinsic_of(DirectionControl), Some(expect));
        assert_eq!(tr.intrinsic_total, expect);
    }
}

#[test]
fn transitions_match_component_oracles() {
    let (mut agent, mut env) = keydoor_agent(ablation_set(4), 8);
    agent.reset(env.reset(0));
    for _ in 0..200 {
        let tr = agent.agent_step(&mut env).unwrap();
        let mut expected = Vec::new();
        for g in &tr.subgoals {
            let r = match g.kind {
                PixelControl => pc_oracle(&tr.obs, &tr.next_obs, g.index, 4, 0.05),
                DirectionControl => {
                    if agent.actions().direction_of(tr.action).unwrap().index() == g.index { 0.01 } else { 0.0 }
                }
                FeatureControl => {
                    let mut tape = Tape::no_grad();
                    let p = agent.worker().params().values();
                    // the instrumented feature maps are the Worker encoder's, on the acted-from frame
                    let f0 = agent.worker().features(&mut tape, p, &tr.obs).unwrap();
                    let f1 = agent.worker().features(&mut tape, p, &tr.next_obs).unwrap();
                    let (a, b) = tr.features.as_ref().unwrap();
                    assert_eq!((a, b), (&f0, &f1));
                    fc_oracle(&f0, &f1, g.index, 0.05)
                }
                Random => if tr.action == g.index { 0.01 } else { 0.0 },
            };
            expected.push(r);
            assert!((tr.intrinsic_of(g.kind).unwrap() - r).abs() < 1e-12);
        }
        let comps: Vec<f64> = tr.intrinsic.iter().map(|e| e.1).collect();
        assert_eq!(tr.intrinsic_total, compose_intrinsic(&comps));
        assert_eq!(tr.mixed_reward, mix_rewards(tr.intrinsic_total, tr.ext_reward, 0.8).unwrap());
        for (i, c) in comps.iter().enumerate() {
            let mut rest = comps.clone();
            rest.remove(i);
            assert!((compose_intrinsic(&rest) - (tr.intrinsic_total - c)).abs() < 1e-15);
        }
        assert!((tr.log_prob.exp() - 0.2).abs() < 1e-12);
        if tr.done {
            break;
        }
    }
}

#[test]
fn refresh_interval_holds_subgoals() {
    let mut cfg = config(ablation_set(4));
    cfg.refresh_interval = 3;
    let mut env = KeyDoor::new(12, 300, false);
    let mut agent = Agent::for_env(cfg, &env, 10).unwrap();
    agent.reset(env.reset(0));
    let mut trs = Vec::new();
    for _ in 0..30 {
        trs.push(agent.agent_step(&mut env).unwrap());
    }
    for (t, tr) in trs.iter().enumerate() {
        assert_eq!(tr.decision.is_some(), t % 3 == 0, "step {t}");
        if t % 3 != 0 {
            assert_eq!(tr.subgoals, trs[t - t % 3].subgoals);
        }
    }
}

#[test]
fn terminal_step_ends_episode() {
    let mut env = KeyDoor::new(12, 5, false);
    let mut agent = Agent::for_env(config(vec![DirectionControl]), &env, 11).unwrap();
    agent.reset(env.reset(0));
    let mut last = None;
    for _ in 0..5 {
        last = Some(agent.agent_step(&mut env).unwrap());
    }
    assert!(last.unwrap().done);
    assert!(!agent.in_episode());
    assert!(matches!(agent.prepare(), Err(AgentError::NoEpisode)));
    agent.reset(env.reset(0));
    assert_eq!(agent.worker_state().unwrap(), &agent.worker().initial_state());
    assert_eq!(agent.episode_step(), 0);
}

#[test]
fn prepare_is_idempotent_and_invalidate_keeps_subgoals() {
    let (mut agent, mut env) = keydoor_agent(ablation_set(3), 12);
    agent.reset(env.reset(0));
    let a = agent.prepare().unwrap().clone();
    let b = agent.prepare().unwrap().clone();
    assert_eq!(a.probs, b.probs);
    let before = agent.current_subgoals().unwrap().to_vec();
    agent.invalidate();
    let c = agent.prepare().unwrap().clone();
    assert_eq!(agent.current_subgoals().unwrap(), before.as_slice());
    assert_eq!(a.onehots, c.onehots);
    let tr = agent.commit(&mut env).unwrap();
    assert!(tr.decision.is_some());
}

proptest! {
    #[test]
    fn encoded_subgoals_have_one_one_per_block(pc in 0usize..9, dc in 0usize..5, fc in 0usize..16, r in 0usize..5) {
        let layout = SubgoalLayout::new(vec![(PixelControl, 9), (DirectionControl, 5), (FeatureControl, 16), (Random, 5)]).unwrap();
        let v = encode_subgoals(&[
            Subgoal::new(PixelControl, pc, 9),
            Subgoal::new(DirectionControl, dc, 5),
            Subgoal::new(FeatureControl, fc, 16),
            Subgoal::new(Random, r, 5),
        ], &layout).unwrap();
        prop_assert_eq!(v.iter().filter(|&&x| x == 1.0).count(), 4);
        prop_assert_eq!(v.iter().filter(|&&x| x == 0.0).count(), 31);
    }
}
