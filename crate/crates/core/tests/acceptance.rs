//! Acceptance suite. Runs every criterion, prints one line per criterion and
//! fails if any criterion fails.
//!
//! `cargo test --release -p pushgrasp-core --test acceptance`
//!
//! Set `ACCEPTANCE_ONLY=1,2,10` to run a subset; the training-backed
//! criteria (7, 8, 9) share one curriculum run.

use std::collections::HashSet;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use pushgrasp::config::{NetworkConfig, RewardSemantics, RunConfig, Scenario};
use pushgrasp::evaluation::{
    benchmark_scene_seed, completion, grasp_success, motion_number, push_efficacy, run_benchmark, run_episode, smooth, trailing_mean,
    Agent, EpisodeMeta, EpisodeRecord, GreedyGraspAgent, QAgent, RandomAgent, Smoothing, Termination,
};
use pushgrasp::learning::{q_improved, MemorySink, RewardComputer, Trainer};
use pushgrasp::nn::{AdamConfig, NetInput, PixelTarget, QNet};
use pushgrasp::perception::{build_rotated_stack, decode_pixel, encode_pixel, render, rotate_observation, Observation, RotatedStack};
use pushgrasp::policy::{select_action, view_input, ActionSpec, DualNet, Mode, Primitive, QMapStack, Stage};
use pushgrasp::rng::{seeded, SimRng};
use pushgrasp::sim::{
    feasible_goal_grasps, spawn_scene, GraspCommand, GraspFailure, GraspOracle, GraspResult, ObjectBody, Pose, Scene, Shape, GOAL_COLOR_ID,
};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- 1

fn rewards() -> Outcome {
    let rc = |semantics| RewardComputer {
        q_improvement_threshold: 0.1,
        push_reward_positive: 0.5,
        push_reward_negative: -0.5,
        semantics,
    };
    let mut bad = Vec::new();
    let c = rc(RewardSemantics::Corrected);
    let success = |id| GraspResult::Success { object_id: id };
    let fail = GraspResult::Failure { reason: GraspFailure::Collision };
    for (got, want, what) in [
        (c.grasp_reward(&success(4), 4, false), (1.0, 4), "goal grasped"),
        (c.grasp_reward(&success(2), 4, false), (0.0, 4), "other grasped, no relabel"),
        (c.grasp_reward(&success(2), 4, true), (1.0, 2), "other grasped, relabel"),
        (c.grasp_reward(&fail, 4, false), (0.0, 4), "failed grasp"),
        (c.grasp_reward(&fail, 4, true), (0.0, 4), "failed grasp, relabel"),
    ] {
        if got != want {
            bad.push(format!("{what}: {got:?} != {want:?}"));
        }
    }
    // (q_improved, changed) -> (corrected, literal)
    let table = [
        (0.3, true, 0.5, 0.0),
        (0.3, false, -0.5, 0.5),
        (0.05, true, 0.0, 0.0),
        (0.05, false, -0.5, -0.5),
        (0.0, false, -0.5, -0.5),
        (0.0, true, 0.0, 0.0),
    ];
    let l = rc(RewardSemantics::Literal);
    for (q, changed, corrected, literal) in table {
        if c.push_reward(q, changed) != corrected {
            bad.push(format!("corrected ({q}, {changed}) -> {}", c.push_reward(q, changed)));
        }
        if l.push_reward(q, changed) != literal {
            bad.push(format!("literal ({q}, {changed}) -> {}", l.push_reward(q, changed)));
        }
    }
    if q_improved(1.2, 1.5) != 1.5 - 1.2 || q_improved(0.7, 0.7) != 0.0 || q_improved(1.5, 1.2) != 1.2 - 1.5 {
        bad.push("q_improved arithmetic".into());
    }
    outcome(bad.is_empty(), if bad.is_empty() { "5 grasp cases, 12 push cells, improvement arithmetic".into() } else { bad.join("; ") })
}

// ---------------------------------------------------------------- 2

fn geometry() -> Outcome {
    let res = 64;
    let mut rng = seeded(0x6e0);
    let mut worst: f64 = 0.0;
    let mut misses = 0;
    for _ in 0..10_000 {
        let (k, u, v) = (rng.gen_range(0..16), rng.gen_range(0..res), rng.gen_range(0..res));
        let pose = decode_pixel(k, u, v, res).unwrap();
        match encode_pixel(k, pose.position(), res) {
            Some((eu, ev)) => worst = worst.max((eu as f64 - u as f64).abs().max((ev as f64 - v as f64).abs())),
            None => misses += 1,
        }
    }
    let cfg = RunConfig::default();
    let mut mask_errors = 0;
    for seed in 0..8 {
        let scene = spawn_scene(Scenario::Pile, 10, seed, &cfg.sim).unwrap();
        let obs = render(&scene, res, cfg.sim.max_height);
        let once = rotate_observation(&obs, 8);
        let as_obs = Observation {
            color: once.color.clone(),
            depth: once.depth.clone(),
            goal_mask: once.goal_mask.clone(),
            all_mask: once.all_mask.clone(),
            ids: obs.ids.clone(),
        };
        let twice = rotate_observation(&as_obs, 8);
        mask_errors += (twice.goal_mask != obs.goal_mask) as usize + (twice.all_mask != obs.all_mask) as usize;
    }
    outcome(
        worst <= 0.5 && misses == 0 && mask_errors == 0,
        format!("10000 round trips, max error {worst} px, {misses} unencodable; k=8 twice on 8 scenes: {mask_errors} mask mismatches"),
    )
}

// ---------------------------------------------------------------- 3

fn single_object(seed: u64, cfg: &RunConfig) -> Scene {
    let mut rng = seeded(seed);
    let (shape, half) = match seed % 3 {
        0 => (Shape::Square, [cfg.sim.square_half; 2]),
        1 => (Shape::Rectangle, [cfg.sim.rect_half_long, cfg.sim.rect_half_short]),
        _ => (Shape::Disc, [cfg.sim.disc_radius; 2]),
    };
    Scene::new(
        vec![ObjectBody {
            id: 0,
            shape,
            half_extents: half,
            height: 0.05,
            pose: Pose {
                x: rng.gen_range(0.3..0.7),
                y: rng.gen_range(0.3..0.7),
                theta: rng.gen_range(0.0..std::f64::consts::TAU),
            },
            color_id: GOAL_COLOR_ID,
            is_goal: true,
        }],
        seed,
    )
}

fn grasp_oracle_sweep() -> Outcome {
    let cfg = RunConfig::default();
    let res = 64;
    let mut disagreements = 0;
    let mut packed_feasible = 0;
    let mut single_empty = 0;
    let mut nondeterministic = 0;
    for i in 0..20u64 {
        let packed = i < 10;
        let scene = if packed { spawn_scene(Scenario::Packed, 5, 100 + i, &cfg.sim).unwrap() } else { single_object(i, &cfg) };
        let sweep = feasible_goal_grasps(&scene, &cfg.sim, res, usize::MAX);
        if sweep != feasible_goal_grasps(&scene, &cfg.sim, res, usize::MAX) {
            nondeterministic += 1;
        }
        let hits: HashSet<(usize, usize, usize)> = sweep.iter().copied().collect();
        if packed && !hits.is_empty() {
            packed_feasible += 1;
        }
        if !packed && hits.is_empty() {
            single_empty += 1;
        }
        let oracle = GraspOracle::new(&scene);
        let goal = scene.goal_id();
        let mut rng = seeded(derive(i));
        let hit_list: Vec<_> = sweep.clone();
        for j in 0..1000 {
            // Half the subsample from the sweep's hits when there are any.
            let (k, u, v) = if j % 2 == 0 && !hit_list.is_empty() {
                hit_list[rng.gen_range(0..hit_list.len())]
            } else {
                (rng.gen_range(0..16), rng.gen_range(0..res), rng.gen_range(0..res))
            };
            let pose = decode_pixel(k, u, v, res).unwrap();
            let cmd = GraspCommand::with_config(pose.position(), k, &cfg.sim);
            let lifts_goal = oracle.evaluate(&cmd).grasped() == goal && goal.is_some();
            if lifts_goal != hits.contains(&(k, u, v)) {
                disagreements += 1;
            }
        }
    }
    outcome(
        disagreements == 0 && packed_feasible == 0 && single_empty == 0 && nondeterministic == 0,
        format!(
            "20 scenes x 1000 sampled actions: {disagreements} disagreements; packed with a feasible goal grasp: {packed_feasible}/10; single objects without one: {single_empty}/10"
        ),
    )
}

fn derive(i: u64) -> u64 {
    pushgrasp::rng::derive_seed(0x5eed, &[i])
}

// ---------------------------------------------------------------- 4

fn masked_selection() -> Outcome {
    let cfg = RunConfig::default();
    let res = 32;
    let mut rng = seeded(0x4a5c);
    let mut violations = 0;
    let mut grasps = 0;
    let mut pushes = 0;
    let mut i = 0u64;
    while grasps + pushes < 1000 {
        let scenario = [Scenario::Sparse, Scenario::Packed, Scenario::Pile][(i % 3) as usize];
        let n = [5, 5, 10][(i % 3) as usize];
        let scene = spawn_scene(scenario, n, 1000 + i, &cfg.sim).unwrap();
        let stack = build_rotated_stack(&render(&scene, res, cfg.sim.max_height));
        for _ in 0..10 {
            let mut g = QMapStack::filled(Primitive::Grasp, res, 0.0);
            let mut p = QMapStack::filled(Primitive::Push, res, 0.0);
            let scale = rng.gen_range(0.5..3.0);
            for k in 0..16 {
                for u in 0..res {
                    for v in 0..res {
                        g.set(k, u, v, rng.gen_range(0.0..scale));
                        p.set(k, u, v, rng.gen_range(-1.0..1.0));
                    }
                }
            }
            let a = select_action(&g, &p, &stack, Mode::Test, 1.8, 0.0, &mut rng).unwrap();
            let view = &stack.views[a.k];
            match a.primitive {
                Primitive::Grasp => {
                    grasps += 1;
                    violations += !view.goal_mask.get(a.u, a.v) as usize;
                }
                Primitive::Push => {
                    pushes += 1;
                    violations += !view.all_mask.get(a.u, a.v) as usize;
                }
            }
        }
        i += 1;
    }
    // Boundary: the goal-masked maximum equals the threshold exactly.
    let scene = spawn_scene(Scenario::Pile, 10, 3, &cfg.sim).unwrap();
    let stack = build_rotated_stack(&render(&scene, res, cfg.sim.max_height));
    let mut g = QMapStack::filled(Primitive::Grasp, res, 0.0);
    let (k, u, v) = (0..16)
        .flat_map(|k| (0..res).flat_map(move |u| (0..res).map(move |v| (k, u, v))))
        .find(|&(k, u, v)| stack.views[k].goal_mask.get(u, v))
        .expect("goal visible");
    g.set(k, u, v, 1.8);
    g.set(0, 0, 0, 9.0);
    let p = QMapStack::filled(Primitive::Push, res, 0.0);
    let boundary = select_action(&g, &p, &stack, Mode::Test, 1.8, 0.0, &mut rng).map(|a| a.primitive);
    outcome(
        violations == 0 && boundary == Some(Primitive::Push) && grasps > 0 && pushes > 0,
        format!("{grasps} grasps + {pushes} pushes, {violations} off-mask; max = 1.8 selects {boundary:?}"),
    )
}

// ---------------------------------------------------------------- 5, 6

fn miniature() -> NetworkConfig {
    NetworkConfig {
        resolution: 16,
        tower_depth: 2,
        tower_width: 4,
        head_channels: 4,
        downsample: 1,
        ..NetworkConfig::default()
    }
}

fn scene_input(res: usize, seed: u64, views: &[usize]) -> NetInput {
    let cfg = RunConfig::default();
    let scene = spawn_scene(Scenario::Pile, 6, seed, &cfg.sim).unwrap();
    let stack = build_rotated_stack(&render(&scene, res, cfg.sim.max_height));
    let items: Vec<NetInput> = views.iter().map(|&k| view_input(&stack.views[k])).collect();
    NetInput::stack(&items.iter().collect::<Vec<_>>())
}

fn gradient_check() -> Outcome {
    let mut net = QNet::new(&miniature()).unwrap();
    let input = scene_input(16, 5, &[0, 3]);
    let targets = [
        PixelTarget { index: 0, u: 7, v: 8, target: 0.7 },
        PixelTarget { index: 1, u: 4, v: 11, target: -0.4 },
    ];
    net.compute_gradients(&input, &targets, 1.0).unwrap();
    let analytic: Vec<Vec<f64>> = net.params().iter().map(|p| p.grad.clone()).collect();
    let sizes: Vec<usize> = analytic.iter().map(Vec::len).collect();
    let mut rng = seeded(0x9c);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut seen = HashSet::new();
    while seen.len() < 20 {
        let t = rng.gen_range(0..sizes.len());
        let i = rng.gen_range(0..sizes[t]);
        if seen.contains(&(t, i)) {
            continue;
        }
        let orig = net.params()[t].value[i];
        net.params_mut()[t].value[i] = orig + h;
        let up = net.loss(&input, &targets, 1.0).unwrap();
        net.params_mut()[t].value[i] = orig - h;
        let down = net.loss(&input, &targets, 1.0).unwrap();
        net.params_mut()[t].value[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[t][i];
        // Parameters with no influence on the executed pixels have zero gradient on both routes.
        let scale = a.abs().max(numeric.abs());
        if scale < 1e-9 {
            continue;
        }
        worst = worst.max((a - numeric).abs() / scale);
        seen.insert((t, i));
    }
    outcome(worst <= 1e-3, format!("20 parameters, max relative error {worst:.2e}"))
}

fn overfit_one_sample() -> Outcome {
    let cfg = RunConfig::default();
    let mut net = QNet::new(&cfg.net).unwrap();
    let input = scene_input(cfg.net.resolution, 9, &[2]);
    // A successful terminal grasp: the target is the reward.
    let targets = [PixelTarget { index: 0, u: 30, v: 33, target: 1.0 }];
    let adam = AdamConfig::new(cfg.learn.learning_rate, cfg.learn.weight_decay);
    let first = net.train_step(&input, &targets, cfg.learn.huber_delta, &adam).unwrap();
    for _ in 1..50 {
        net.train_step(&input, &targets, cfg.learn.huber_delta, &adam).unwrap();
    }
    let last = net.loss(&input, &targets, cfg.learn.huber_delta).unwrap();
    let drop = 1.0 - last / first;
    outcome(drop >= 0.9, format!("loss {first:.4e} -> {last:.4e} after 50 steps ({:.1}% reduction)", 100.0 * drop))
}

// ---------------------------------------------------------------- 7, 8, 9

struct Curriculum {
    after_stage1: DualNet,
    after_stage2: DualNet,
    after_stage4: DualNet,
    stage1_train_rolling: f64,
    cfg: RunConfig,
    stage1_time: Duration,
    total_time: Duration,
}

fn curriculum() -> &'static Curriculum {
    static C: OnceLock<Curriculum> = OnceLock::new();
    C.get_or_init(|| {
        let cfg = RunConfig::default();
        let start = Instant::now();
        let mut t = Trainer::new(cfg.clone(), "acceptance").unwrap();
        let mut sink = MemorySink::default();
        let mut snapshots = Vec::new();
        let mut stage1_time = Duration::ZERO;
        for stage in Stage::ALL {
            let r = t.run_stage(stage, 0, &mut sink).unwrap();
            eprintln!(
                "    {stage}: {} episodes, {} successes, threshold {:.3}, {:.0} s elapsed",
                r.episodes,
                r.successes,
                r.grasp_threshold,
                start.elapsed().as_secs_f64()
            );
            if stage == Stage::GraspExplore {
                stage1_time = start.elapsed();
            }
            snapshots.push(t.nets.clone());
        }
        let explore: Vec<f64> = sink
            .episodes
            .iter()
            .filter(|e| e.stage == Stage::GraspExplore)
            .map(|e| e.success as u8 as f64)
            .collect();
        Curriculum {
            after_stage1: snapshots[1].clone(),
            after_stage2: snapshots[2].clone(),
            after_stage4: snapshots[3].clone(),
            stage1_train_rolling: trailing_mean(&explore, 50).unwrap_or(0.0),
            cfg,
            stage1_time,
            total_time: start.elapsed(),
        }
    })
}

fn grasp_learning() -> Outcome {
    let c = curriculum();
    let mut cfg = c.cfg.clone();
    cfg.eval.action_cap = 1;
    let agent = GreedyGraspAgent { nets: c.after_stage1.clone() };
    let (trained, _) = run_benchmark(&agent, Scenario::Sparse, 5, 500, 0x7e57, &cfg).unwrap();
    let (random, _) = run_benchmark(&RandomAgent::grasp_only(), Scenario::Sparse, 5, 500, 0x7e57, &cfg).unwrap();
    let series = |r: &[EpisodeRecord]| r.iter().map(|e| e.completed as u8 as f64).collect::<Vec<_>>();
    let rolling = trailing_mean(&series(&trained), 50).unwrap();
    let base = series(&random).iter().sum::<f64>() / 500.0;
    let mean = series(&trained).iter().sum::<f64>() / 500.0;
    let budget = Duration::from_secs(8 * 3600);
    outcome(
        rolling >= 0.6 && rolling >= 3.0 * base && c.stage1_time <= budget,
        format!(
            "greedy goal-grasp success over 500 sparse-5 scenes: final rolling-50 {rolling:.3} (mean {mean:.3}); random valid-pixel baseline {base:.3}; training-curve rolling-50 {:.3}; stage-1 training {:.0} s",
            c.stage1_train_rolling,
            c.stage1_time.as_secs_f64()
        ),
    )
}

fn push_efficacy_check() -> Outcome {
    let c = curriculum();
    let e = push_efficacy(&c.after_stage2, Scenario::Packed, 5, 50, 0x8a5, &c.cfg).unwrap();
    let (t, r) = (e.trained_rate(), e.random_rate());
    outcome(
        t >= 0.6 && r <= 0.4,
        format!("50 packed scenes: trained push raised goal grasp-Q in {:.0}%, random push in {:.0}%", 100.0 * t, 100.0 * r),
    )
}

fn packed_benchmark() -> Outcome {
    let c = curriculum();
    let agent = QAgent::new(c.after_stage4.clone());
    let (records, report) = run_benchmark(&agent, Scenario::Packed, 5, 100, 0x9ac, &c.cfg).unwrap();
    let cm = report.completion.map(|s| s.mean).unwrap_or(0.0);
    let mn = report.motion_number.map(|s| s.mean);
    let gs = report.grasp_success.map(|s| s.mean);
    let reasons = |t| records.iter().filter(|r| r.termination_reason == t).count();
    outcome(
        cm >= 0.8 && mn.is_some_and(|m| m <= 3.0),
        format!(
            "100 packed-5 scenes: C {:.2}, GS {}, MN {}; terminations goal {} / five-failures {} / cap {} / lost {}; curriculum {:.0} s",
            cm,
            gs.map_or("-".into(), |g| format!("{g:.2}")),
            mn.map_or("-".into(), |m| format!("{m:.2}")),
            reasons(Termination::GoalGrasped),
            reasons(Termination::FiveFailures),
            reasons(Termination::ActionCap),
            reasons(Termination::GoalLost),
            c.total_time.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 10

fn rec(completed: bool, attempts: usize, successes: usize, pushes: usize) -> EpisodeRecord {
    EpisodeRecord {
        scenario: Scenario::Packed,
        n_objects: 5,
        seed: 0,
        actions: Vec::new(),
        goal_grasp_attempts: attempts,
        goal_grasp_successes: successes,
        push_count: pushes,
        completed,
        termination_reason: if completed { Termination::GoalGrasped } else { Termination::FiveFailures },
    }
}

/// Fails grasps at an empty corner, pushing once after the fourth failure.
struct FailingGrasper;

impl Agent for FailingGrasper {
    fn name(&self) -> String {
        "failing".into()
    }
    fn select(&self, obs: &Observation, _stack: &RotatedStack, rng: &mut SimRng) -> pushgrasp::Result<Option<ActionSpec>> {
        let _ = rng;
        let pose = decode_pixel(0, 0, 0, obs.resolution())?;
        Ok(Some(ActionSpec { primitive: Primitive::Grasp, k: 0, u: 0, v: 0, q_value: 0.0, pose }))
    }
}

struct Scripted(std::sync::Mutex<usize>);

impl Agent for Scripted {
    fn name(&self) -> String {
        "scripted".into()
    }
    fn select(&self, obs: &Observation, _stack: &RotatedStack, _rng: &mut SimRng) -> pushgrasp::Result<Option<ActionSpec>> {
        let mut n = self.0.lock().unwrap();
        *n += 1;
        let primitive = if *n == 5 { Primitive::Push } else { Primitive::Grasp };
        let pose = decode_pixel(0, 0, 0, obs.resolution())?;
        Ok(Some(ActionSpec { primitive, k: 0, u: 0, v: 0, q_value: 0.0, pose }))
    }
}

fn metric_definitions() -> Outcome {
    let mut bad = Vec::new();
    let records = vec![rec(true, 1, 1, 2), rec(true, 3, 1, 4), rec(false, 5, 0, 9), rec(true, 2, 1, 0)];
    let c = completion(&records).unwrap().mean;
    let gs = grasp_success(&records).unwrap().mean;
    let mn = motion_number(&records).unwrap().mean;
    if c != 3.0 / 4.0 {
        bad.push(format!("C {c}"));
    }
    if gs != 3.0 / 11.0 {
        bad.push(format!("GS {gs}"));
    }
    // Failed run's 9 pushes excluded; grasp attempts never counted.
    if mn != 2.0 {
        bad.push(format!("MN {mn}"));
    }
    if motion_number(&[rec(false, 5, 0, 3)]).is_some() {
        bad.push("MN defined without completed runs".into());
    }

    let cfg = RunConfig::default();
    let meta = EpisodeMeta { scenario: Scenario::Packed, n_objects: 5, seed: 1 };
    let scene = spawn_scene(Scenario::Packed, 5, 1, &cfg.sim).unwrap();
    let r = run_episode(scene.clone(), &FailingGrasper, &cfg, meta);
    if r.termination_reason != Termination::FiveFailures || r.goal_grasp_attempts != 5 || r.actions.len() != 5 {
        bad.push(format!("five failures: {:?} after {} attempts", r.termination_reason, r.goal_grasp_attempts));
    }
    // A push between failures does not reset the count: terminates on the 5th failed grasp, 6th action.
    let r = run_episode(scene, &Scripted(std::sync::Mutex::new(0)), &cfg, meta);
    if r.termination_reason != Termination::FiveFailures || r.goal_grasp_attempts != 5 || r.actions.len() != 6 || r.push_count != 1 {
        bad.push(format!("push between failures: {:?}, {} attempts, {} actions", r.termination_reason, r.goal_grasp_attempts, r.actions.len()));
    }
    outcome(bad.is_empty(), if bad.is_empty() { "C 3/4, GS 3/11, MN 2 (failed run and grasp attempts excluded), 5th failure terminates".into() } else { bad.join("; ") })
}

// ---------------------------------------------------------------- 11

fn determinism() -> Outcome {
    let cfg = RunConfig::default();
    let corpus = || -> Vec<String> {
        [(Scenario::Packed, 5), (Scenario::Pile, 10), (Scenario::Pile, 20)]
            .iter()
            .flat_map(|&(s, n)| (0..20).map(move |i| (s, n, i)))
            .map(|(s, n, i)| spawn_scene(s, n, benchmark_scene_seed(42, s, n, i), &cfg.sim).unwrap().to_json().unwrap())
            .collect()
    };
    let nets = DualNet::new(&cfg.net).unwrap();
    let bench = || -> String {
        let mut out = String::new();
        for agent in [&QAgent::new(nets.clone()) as &dyn Agent, &RandomAgent::default()] {
            let (records, report) = run_benchmark(agent, Scenario::Pile, 10, 4, 42, &cfg).unwrap();
            out.push_str(&serde_json::to_string(&records).unwrap());
            out.push_str(&serde_json::to_string(&report).unwrap());
        }
        out
    };
    let same_corpus = corpus() == corpus();
    let same_bench = bench() == bench();
    outcome(same_corpus && same_bench, format!("scene corpora identical: {same_corpus}; records and summaries identical: {same_bench}"))
}

// ---------------------------------------------------------------- 12

fn smoothing() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut check = |got: &[f64], want: &dyn Fn(usize) -> f64| {
        for (t, g) in got.iter().enumerate() {
            worst = worst.max((g - want(t)).abs());
        }
    };
    let n = 200;
    let constant = vec![0.37; n];
    let impulse: Vec<f64> = (0..n).map(|t| (t == 60) as u8 as f64).collect();
    let alternating: Vec<f64> = (0..n).map(|t| (t % 2) as f64).collect();

    check(&smooth(&constant, Smoothing::Exponential(0.9)), &|_| 0.37);
    check(&smooth(&impulse, Smoothing::Exponential(0.9)), &|t| if t < 60 { 0.0 } else { 0.1 * 0.9f64.powi(t as i32 - 60) });
    // y_t = 0.5 - 0.5 * (-0.9)^t * ... closed form of the recurrence on 0,1,0,1,...
    check(&smooth(&alternating, Smoothing::Exponential(0.9)), &|t| {
        let t = t as i32;
        // Sum over odd s <= t of 0.1 * 0.9^(t - s).
        (0..=t).filter(|s| s % 2 == 1).map(|s| 0.1 * 0.9f64.powi(t - s)).sum()
    });
    for w in [50usize, 7] {
        let bounds = |t: usize| (t.saturating_sub(w / 2), (t + (w - 1) / 2).min(n - 1));
        check(&smooth(&constant, Smoothing::Rolling(w)), &|_| 0.37);
        check(&smooth(&impulse, Smoothing::Rolling(w)), &|t| {
            let (lo, hi) = bounds(t);
            if (lo..=hi).contains(&60) { 1.0 / (hi - lo + 1) as f64 } else { 0.0 }
        });
        check(&smooth(&alternating, Smoothing::Rolling(w)), &|t| {
            let (lo, hi) = bounds(t);
            let odd = (hi + 1) / 2 - lo / 2;
            odd as f64 / (hi - lo + 1) as f64
        });
    }
    outcome(worst <= 1e-12, format!("constant, impulse and alternating series; exponential 0.9 and rolling 50/7; max deviation {worst:.1e}"))
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(u32, &str, Duration, fn() -> Outcome); 12] = [
        (1, "reward exactness", Duration::from_secs(1), rewards),
        (2, "geometry round trip", Duration::from_secs(10), geometry),
        (3, "grasp-oracle sweep", Duration::from_secs(300), grasp_oracle_sweep),
        (4, "masked selection", Duration::from_secs(30), masked_selection),
        (5, "gradient check", Duration::from_secs(60), gradient_check),
        (6, "overfit one sample", Duration::from_secs(60), overfit_one_sample),
        (7, "stage-1 grasp learning", Duration::MAX, grasp_learning),
        (8, "stage-2 push efficacy", Duration::from_secs(15 * 60), push_efficacy_check),
        (9, "packed benchmark", Duration::from_secs(30 * 60), packed_benchmark),
        (10, "metric definitions", Duration::from_secs(1), metric_definitions),
        (11, "determinism", Duration::from_secs(600), determinism),
        (12, "smoothing", Duration::from_secs(1), smoothing),
    ];
    let only: Option<HashSet<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    if std::env::args().any(|a| a == "--list") {
        for (id, name, ..) in &criteria {
            println!("criterion_{id}: test ({name})");
        }
        return;
    }
    // Criteria 7-9 time only their evaluation; training is reported separately.
    if only.as_ref().map_or(true, |o| o.iter().any(|i| (7..=9).contains(i))) {
        eprintln!("training the curriculum for criteria 7-9 ...");
        curriculum();
    }
    let mut failed = Vec::new();
    for (id, name, budget, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let mut o = run();
        let took = start.elapsed();
        if took > budget {
            o.pass = false;
            o.detail.push_str(&format!("; over the {:.0} s budget", budget.as_secs_f64()));
        }
        println!("[{}] {id:>2} {name} ({:.2} s): {}", if o.pass { "PASS" } else { "FAIL" }, took.as_secs_f64(), o.detail);
        if !o.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
