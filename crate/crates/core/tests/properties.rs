use std::sync::Arc;

use proptest::prelude::*;
use pushgrasp::config::{RunConfig, Scenario};
use pushgrasp::evaluation::{completion, grasp_success, motion_number, smooth, EpisodeRecord, Smoothing, Termination};
use pushgrasp::learning::{td_target, ReplayBuffer, RewardComputer, Transition};
use pushgrasp::perception::{build_rotated_stack, decode_pixel, encode_pixel, render};
use pushgrasp::policy::{select_action, ActionSpec, ExplorationSchedule, Mode, Primitive, QMapStack, Stage};
use pushgrasp::rng::seeded;
use pushgrasp::sim::{spawn_scene, GraspFailure, GraspResult, Scene};
use rand::Rng;

fn small_cfg() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_override("perception.resolution=32").unwrap();
    cfg
}

fn transition(scene: &Scene, cfg: &RunConfig, i: usize) -> Transition {
    let obs = Arc::new(render(scene, cfg.perception.resolution, cfg.sim.max_height));
    let goal = scene.goal_id().unwrap();
    Transition {
        scene: Arc::new(scene.clone()),
        next_scene: None,
        observation: obs,
        goal_id: goal,
        goal_mask: None,
        action: ActionSpec {
            primitive: Primitive::Grasp,
            k: i % 16,
            u: i % 32,
            v: (i * 7) % 32,
            q_value: i as f64,
            pose: decode_pixel(i % 16, i % 32, (i * 7) % 32, 32).unwrap(),
        },
        reward: 0.0,
        next_observation: None,
        terminal: true,
        stage: Stage::GraspExplore,
        relabeled: false,
        grasp_result: Some(GraspResult::Failure { reason: GraspFailure::Empty }),
        original_goal_id: goal,
        q_improved: None,
        scene_changed: None,
        next_grasp_q_max: 0.0,
    }
}

fn record(completed: bool, attempts: usize, successes: usize, pushes: usize) -> EpisodeRecord {
    EpisodeRecord {
        scenario: Scenario::Pile,
        n_objects: 10,
        seed: 0,
        actions: Vec::new(),
        goal_grasp_attempts: attempts,
        goal_grasp_successes: successes,
        push_count: pushes,
        completed,
        termination_reason: if completed { Termination::GoalGrasped } else { Termination::ActionCap },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decode_encode_round_trip(k in 0usize..16, u in 0usize..64, v in 0usize..64) {
        let pose = decode_pixel(k, u, v, 64).unwrap();
        prop_assert_eq!(encode_pixel(k, pose.position(), 64), Some((u, v)));
    }

    #[test]
    fn replay_is_fifo(capacity in 1usize..20, extra in 0usize..30) {
        let cfg = small_cfg();
        let scene = spawn_scene(Scenario::Sparse, 2, 1, &cfg.sim).unwrap();
        let mut buf = ReplayBuffer::new(capacity);
        for i in 0..capacity + extra {
            buf.push(transition(&scene, &cfg, i));
        }
        prop_assert_eq!(buf.len(), capacity);
        let kept: Vec<f64> = buf.iter().map(|t| t.action.q_value).collect();
        let expected: Vec<f64> = (extra..capacity + extra).map(|i| i as f64).collect();
        prop_assert_eq!(kept, expected);
    }

    #[test]
    fn terminal_targets_ignore_the_future(r in -1.0f64..1.0, q in -5.0f64..5.0, rho in 0.0f64..1.0) {
        prop_assert_eq!(td_target(r, true, q, rho), r);
        prop_assert_eq!(td_target(r, false, q, rho), r + rho * q);
    }

    #[test]
    fn epsilon_stays_in_range_and_decays(n in 0u64..100_000) {
        let s = ExplorationSchedule { initial: 0.5, decay: 0.9998, floor: 0.1 };
        let e = s.epsilon(n);
        prop_assert!((0.1..=0.5).contains(&e));
        prop_assert!(s.epsilon(n + 1) <= e);
        prop_assert_eq!(e, (0.5 * 0.9998f64.powf(n as f64)).max(0.1));
    }

    #[test]
    fn test_mode_selection_respects_masks(seed in 0u64..500, scenario in 0usize..3) {
        let cfg = small_cfg();
        let scenario = [Scenario::Sparse, Scenario::Packed, Scenario::Pile][scenario];
        let scene = spawn_scene(scenario, 5, seed, &cfg.sim).unwrap();
        let obs = render(&scene, 32, cfg.sim.max_height);
        let stack = build_rotated_stack(&obs);
        let mut rng = seeded(seed);
        let mut g = QMapStack::filled(Primitive::Grasp, 32, 0.0);
        let mut p = QMapStack::filled(Primitive::Push, 32, 0.0);
        for k in 0..16 {
            for u in 0..32 {
                for v in 0..32 {
                    g.set(k, u, v, rng.gen_range(0.0..2.0));
                    p.set(k, u, v, rng.gen_range(-1.0..1.0));
                }
            }
        }
        let a = select_action(&g, &p, &stack, Mode::Test, 1.0, 0.0, &mut rng).unwrap();
        let view = &stack.views[a.k];
        match a.primitive {
            Primitive::Grasp => prop_assert!(view.goal_mask.get(a.u, a.v)),
            Primitive::Push => prop_assert!(view.all_mask.get(a.u, a.v)),
        }
    }

    #[test]
    fn metrics_are_permutation_invariant(
        runs in prop::collection::vec((any::<bool>(), 0usize..6, 0usize..9), 1..20),
        rot in 0usize..20,
    ) {
        let recs: Vec<EpisodeRecord> = runs.iter().map(|&(c, a, p)| record(c, a.max(c as usize), c as usize, p)).collect();
        let mut shuffled = recs.clone();
        shuffled.rotate_left(rot % recs.len());
        shuffled.reverse();
        let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(x), Some(y)) => (x - y).abs() < 1e-12,
            (None, None) => true,
            _ => false,
        };
        prop_assert!(close(completion(&recs).map(|s| s.mean), completion(&shuffled).map(|s| s.mean)));
        prop_assert!(close(grasp_success(&recs).map(|s| s.mean), grasp_success(&shuffled).map(|s| s.mean)));
        prop_assert!(close(motion_number(&recs).map(|s| s.mean), motion_number(&shuffled).map(|s| s.mean)));
        let c = completion(&recs).unwrap().mean;
        prop_assert!((0.0..=1.0).contains(&c));
        if let Some(gs) = grasp_success(&recs) {
            prop_assert!((0.0..=1.0).contains(&gs.mean));
        }
    }

    #[test]
    fn smoothing_preserves_constants(c in -3.0f64..3.0, n in 1usize..120, w in 1usize..60) {
        let xs = vec![c; n];
        for y in smooth(&xs, Smoothing::Rolling(w)) {
            prop_assert!((y - c).abs() <= 1e-12 * c.abs().max(1.0));
        }
        for y in smooth(&xs, Smoothing::Exponential(0.9)) {
            prop_assert!((y - c).abs() <= 1e-12 * c.abs().max(1.0));
        }
    }

    #[test]
    fn config_text_round_trips(seed in any::<u64>(), lr in 1e-6f64..1e-2, objects in 1usize..30) {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.learn.learning_rate = lr;
        cfg.learn.alternating_objects = objects;
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn scene_json_round_trips(seed in 0u64..200, n in 2usize..12, scenario in 0usize..3) {
        let cfg = RunConfig::default();
        let scenario = [Scenario::Sparse, Scenario::Packed, Scenario::Pile][scenario];
        let scene = spawn_scene(scenario, n, seed, &cfg.sim).unwrap();
        let back = Scene::from_json(&scene.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, scene);
    }

    #[test]
    fn rewards_recompute_from_stored_fields(q in -1.0f64..1.0, changed in any::<bool>(), literal in any::<bool>()) {
        let cfg = small_cfg();
        let rc = RewardComputer {
            q_improvement_threshold: 0.1,
            push_reward_positive: 0.5,
            push_reward_negative: -0.5,
            semantics: if literal { pushgrasp::config::RewardSemantics::Literal } else { pushgrasp::config::RewardSemantics::Corrected },
        };
        let scene = spawn_scene(Scenario::Packed, 5, 3, &cfg.sim).unwrap();
        let mut t = transition(&scene, &cfg, 3);
        t.action.primitive = Primitive::Push;
        t.grasp_result = None;
        t.q_improved = Some(q);
        t.scene_changed = Some(changed);
        t.reward = rc.push_reward(q, changed);
        prop_assert_eq!(t.recompute_reward(&rc), t.reward);
    }
}

#[test]
fn replay_jsonl_round_trip_rebuilds_identical_inputs() {
    let cfg = small_cfg();
    let mut buf = ReplayBuffer::new(10);
    for i in 0..6u64 {
        let scene = spawn_scene(Scenario::Pile, 6, i, &cfg.sim).unwrap();
        let mut t = transition(&scene, &cfg, i as usize);
        if i % 2 == 0 {
            let other = scene.objects.iter().find(|o| !o.is_goal).unwrap().id;
            t.relabeled = true;
            t.goal_id = other;
            t.goal_mask = Some(t.observation.object_mask(other));
            t.reward = 1.0;
            t.grasp_result = Some(GraspResult::Success { object_id: other });
        }
        buf.push(t);
    }
    let text = buf.to_jsonl().unwrap();
    let back = ReplayBuffer::from_jsonl(&text, 10, &cfg).unwrap();
    assert_eq!(back.len(), buf.len());
    for (a, b) in buf.iter().zip(back.iter()) {
        assert_eq!(a.input(), b.input());
        assert_eq!(a.action, b.action);
        assert_eq!(a.reward.to_bits(), b.reward.to_bits());
        assert_eq!(a.goal_mask, b.goal_mask);
    }
    assert_eq!(back.to_jsonl().unwrap(), text);
}

#[test]
fn replay_jsonl_reports_bad_line() {
    let cfg = small_cfg();
    let err = ReplayBuffer::from_jsonl("\n{not json}\n", 4, &cfg).unwrap_err();
    assert!(matches!(err, pushgrasp::Error::Parse { line: 2, .. }), "{err}");
}
