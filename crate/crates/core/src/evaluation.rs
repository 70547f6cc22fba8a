//! Benchmark protocols, C/GS/MN metrics and curve smoothing.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Scenario};
use crate::error::Result;
use crate::perception::{build_rotated_stack, decode_pixel, render, Observation, RotatedStack, ROTATIONS};
use crate::policy::{q_maps, select_action, select_grasp, ActionSpec, DualNet, GraspSupport, Mode, Primitive, QMapStack};
use crate::rng::{derive_seed, seeded, SimRng};
use crate::sim::{spawn_scene, step_grasp, step_push, GraspCommand, PushCommand, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GoalGrasped,
    FiveFailures,
    ActionCap,
    GoalLost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub scenario: Scenario,
    pub n_objects: usize,
    pub seed: u64,
    pub actions: Vec<ActionSpec>,
    pub goal_grasp_attempts: usize,
    pub goal_grasp_successes: usize,
    pub push_count: usize,
    pub completed: bool,
    pub termination_reason: Termination,
}

/// A test-time decision maker.
pub trait Agent: Sync {
    fn name(&self) -> String;
    /// `None` means no action is available.
    fn select(&self, obs: &Observation, stack: &RotatedStack, rng: &mut SimRng) -> Result<Option<ActionSpec>>;
}

/// Greedy agent over the two Q-networks with test-mode output masking.
#[derive(Debug, Clone)]
pub struct QAgent {
    pub nets: DualNet,
    pub label: String,
}

impl QAgent {
    pub fn new(nets: DualNet) -> Self {
        Self {
            nets,
            label: "trained".into(),
        }
    }

    pub fn q_maps(&self, stack: &RotatedStack) -> Result<(QMapStack, QMapStack)> {
        Ok((
            q_maps(&self.nets.grasp, Primitive::Grasp, stack)?,
            q_maps(&self.nets.push, Primitive::Push, stack)?,
        ))
    }
}

impl Agent for QAgent {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn select(&self, _obs: &Observation, stack: &RotatedStack, rng: &mut SimRng) -> Result<Option<ActionSpec>> {
        let (g, p) = self.q_maps(stack)?;
        Ok(select_action(&g, &p, stack, Mode::Test, self.nets.grasp_threshold, 0.0, rng))
    }
}

/// Always grasps at the goal-masked argmax of the grasp network.
#[derive(Debug, Clone)]
pub struct GreedyGraspAgent {
    pub nets: DualNet,
}

impl Agent for GreedyGraspAgent {
    fn name(&self) -> String {
        "trained_grasp".into()
    }

    fn select(&self, _obs: &Observation, stack: &RotatedStack, rng: &mut SimRng) -> Result<Option<ActionSpec>> {
        let q = q_maps(&self.nets.grasp, Primitive::Grasp, stack)?;
        Ok(select_grasp(&q, stack, Mode::Test, 0.0, GraspSupport::Goal, rng))
    }
}

/// Uniform over object pixels and rotations. Grasps with probability
/// `grasp_probability`, pushes otherwise.
#[derive(Debug, Clone, Copy)]
pub struct RandomAgent {
    pub grasp_probability: f64,
}

impl Default for RandomAgent {
    fn default() -> Self {
        Self { grasp_probability: 0.5 }
    }
}

impl RandomAgent {
    pub fn grasp_only() -> Self {
        Self { grasp_probability: 1.0 }
    }
}

impl Agent for RandomAgent {
    fn name(&self) -> String {
        if self.grasp_probability >= 1.0 {
            "random_grasp".into()
        } else {
            "random".into()
        }
    }

    fn select(&self, obs: &Observation, _stack: &RotatedStack, rng: &mut SimRng) -> Result<Option<ActionSpec>> {
        let primitive = if rng.gen::<f64>() < self.grasp_probability {
            Primitive::Grasp
        } else {
            Primitive::Push
        };
        Ok(random_object_action(obs, primitive, rng))
    }
}

/// A uniformly drawn object pixel in the unrotated frame plus a uniform rotation.
pub fn random_object_action(obs: &Observation, primitive: Primitive, rng: &mut impl Rng) -> Option<ActionSpec> {
    let res = obs.resolution();
    let pixels: Vec<(usize, usize)> = (0..res)
        .flat_map(|u| (0..res).map(move |v| (u, v)))
        .filter(|&(u, v)| obs.all_mask.get(u, v))
        .collect();
    if pixels.is_empty() {
        return None;
    }
    let (u, v) = pixels[rng.gen_range(0..pixels.len())];
    let k = rng.gen_range(0..ROTATIONS);
    // Encode the world point into the rotated frame so the action is a proper (k,u,v) triple.
    let world = decode_pixel(0, u, v, res).ok()?.position();
    let (ru, rv) = crate::perception::encode_pixel(k, world, res)?;
    Some(ActionSpec {
        primitive,
        k,
        u: ru,
        v: rv,
        q_value: 0.0,
        pose: decode_pixel(k, ru, rv, res).ok()?,
    })
}

/// Identifies a benchmark episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeMeta {
    pub scenario: Scenario,
    pub n_objects: usize,
    pub seed: u64,
}

fn goal_lost(scene: &Scene) -> bool {
    match scene.goal() {
        None => true,
        Some(g) => !scene.workspace.contains(g.pose.position()),
    }
}

/// Runs one test-mode episode. `on_step` sees the scene before each action
/// and once more at the end with no action.
pub fn run_episode_with(
    scene: Scene,
    agent: &dyn Agent,
    cfg: &RunConfig,
    meta: EpisodeMeta,
    on_step: &mut dyn FnMut(&Scene, Option<&ActionSpec>),
) -> EpisodeRecord {
    let mut rng = seeded(derive_seed(meta.seed, &[0xe7a1]));
    let mut scene = scene;
    let mut rec = EpisodeRecord {
        scenario: meta.scenario,
        n_objects: meta.n_objects,
        seed: meta.seed,
        actions: Vec::new(),
        goal_grasp_attempts: 0,
        goal_grasp_successes: 0,
        push_count: 0,
        completed: false,
        termination_reason: Termination::ActionCap,
    };
    let mut failures = 0;
    let mut decisions = 0;
    let reason = loop {
        if goal_lost(&scene) {
            break Termination::GoalLost;
        }
        if decisions >= cfg.eval.action_cap {
            break Termination::ActionCap;
        }
        decisions += 1;
        let obs = render(&scene, cfg.perception.resolution, cfg.sim.max_height);
        let stack = build_rotated_stack(&obs);
        let action = match agent.select(&obs, &stack, &mut rng) {
            Ok(a) => a,
            Err(_) => break Termination::ActionCap,
        };
        on_step(&scene, action.as_ref());
        let Some(action) = action else {
            // No selectable pixel counts as a failed grasp attempt.
            rec.goal_grasp_attempts += 1;
            failures += 1;
            if failures >= cfg.eval.max_consecutive_failures {
                break Termination::FiveFailures;
            }
            continue;
        };
        rec.actions.push(action);
        match action.primitive {
            Primitive::Push => {
                rec.push_count += 1;
                let cmd = PushCommand {
                    start: action.pose.position(),
                    direction_index: action.k,
                    distance: cfg.sim.push_distance,
                };
                scene = step_push(&scene, &cmd, &cfg.sim).0;
            }
            Primitive::Grasp => {
                rec.goal_grasp_attempts += 1;
                let goal = scene.goal_id();
                let cmd = GraspCommand::with_config(action.pose.position(), action.k, &cfg.sim);
                let (next, result) = step_grasp(&scene, &cmd);
                scene = next;
                if result.grasped().is_some() && result.grasped() == goal {
                    rec.goal_grasp_successes += 1;
                    break Termination::GoalGrasped;
                }
                failures += 1;
                if failures >= cfg.eval.max_consecutive_failures {
                    break Termination::FiveFailures;
                }
            }
        }
    };
    on_step(&scene, None);
    rec.completed = reason == Termination::GoalGrasped;
    rec.termination_reason = reason;
    rec
}

pub fn run_episode(scene: Scene, agent: &dyn Agent, cfg: &RunConfig, meta: EpisodeMeta) -> EpisodeRecord {
    run_episode_with(scene, agent, cfg, meta, &mut |_, _| {})
}

fn scenario_tag(s: Scenario) -> u64 {
    match s {
        Scenario::Packed => 1,
        Scenario::Pile => 2,
        Scenario::Sparse => 3,
    }
}

/// Seed of the `index`-th benchmark scene.
pub fn benchmark_scene_seed(base_seed: u64, scenario: Scenario, n_objects: usize, index: u64) -> u64 {
    derive_seed(base_seed, &[scenario_tag(scenario), n_objects as u64, index])
}

/// Mean with standard error; the error is absent for a single sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub stderr: Option<f64>,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let stderr = (xs.len() > 1).then(|| {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            var.sqrt() / n.sqrt()
        });
        Some(Self { mean, stderr })
    }
}

impl std::fmt::Display for Stat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.stderr {
            Some(e) => write!(f, "{:.4} ± {:.4}", self.mean, e),
            None => write!(f, "{:.4}", self.mean),
        }
    }
}

/// Fraction of completed runs.
pub fn completion(records: &[EpisodeRecord]) -> Option<Stat> {
    let xs: Vec<f64> = records.iter().map(|r| r.completed as u8 as f64).collect();
    Stat::of(&xs)
}

/// Pooled goal-grasp successes over attempts. The stderr is taken over the
/// per-run success ratios of runs with at least one attempt.
pub fn grasp_success(records: &[EpisodeRecord]) -> Option<Stat> {
    let attempts: usize = records.iter().map(|r| r.goal_grasp_attempts).sum();
    if attempts == 0 {
        return None;
    }
    let successes: usize = records.iter().map(|r| r.goal_grasp_successes).sum();
    let per_run: Vec<f64> = records
        .iter()
        .filter(|r| r.goal_grasp_attempts > 0)
        .map(|r| r.goal_grasp_successes as f64 / r.goal_grasp_attempts as f64)
        .collect();
    Some(Stat {
        mean: successes as f64 / attempts as f64,
        stderr: Stat::of(&per_run).and_then(|s| s.stderr),
    })
}

/// Mean push count over completed runs only.
pub fn motion_number(records: &[EpisodeRecord]) -> Option<Stat> {
    let xs: Vec<f64> = records.iter().filter(|r| r.completed).map(|r| r.push_count as f64).collect();
    Stat::of(&xs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub completion: Option<Stat>,
    pub grasp_success: Option<Stat>,
    pub motion_number: Option<Stat>,
    pub n_runs: usize,
}

impl MetricsReport {
    pub fn from_records(records: &[EpisodeRecord]) -> Self {
        Self {
            completion: completion(records),
            grasp_success: grasp_success(records),
            motion_number: motion_number(records),
            n_runs: records.len(),
        }
    }
}

/// One row of a comparison table: C, GS, MN as in the published tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub approach: String,
    pub scenario: Scenario,
    pub n_objects: usize,
    #[serde(rename = "C")]
    pub c: Option<Stat>,
    #[serde(rename = "GS")]
    pub gs: Option<Stat>,
    #[serde(rename = "MN")]
    pub mn: Option<Stat>,
    pub n_runs: usize,
}

impl BenchmarkSummary {
    pub fn new(approach: impl Into<String>, scenario: Scenario, n_objects: usize, report: &MetricsReport) -> Self {
        Self {
            approach: approach.into(),
            scenario,
            n_objects,
            c: report.completion,
            gs: report.grasp_success,
            mn: report.motion_number,
            n_runs: report.n_runs,
        }
    }

    /// A fixed-width table row; percentages for C and GS.
    pub fn table_row(&self) -> String {
        let pct = |s: &Option<Stat>| match s {
            Some(Stat { mean, stderr: Some(e) }) => format!("{:.2} ± {:.2}", 100.0 * mean, 100.0 * e),
            Some(Stat { mean, stderr: None }) => format!("{:.2}", 100.0 * mean),
            None => "-".into(),
        };
        let mn = match &self.mn {
            Some(Stat { mean, stderr: Some(e) }) => format!("{mean:.2} ± {e:.2}"),
            Some(Stat { mean, stderr: None }) => format!("{mean:.2}"),
            None => "-".into(),
        };
        format!(
            "{:<16} {:<7} {:>3} | {:>16} | {:>16} | {:>12}",
            self.approach,
            self.scenario.to_string(),
            self.n_objects,
            pct(&self.c),
            pct(&self.gs),
            mn
        )
    }

    pub fn table_header() -> String {
        format!("{:<16} {:<7} {:>3} | {:>16} | {:>16} | {:>12}", "approach", "scene", "n", "C (%)", "GS (%)", "MN")
    }
}

/// Runs `n_scenes` deterministic episodes. Scenes that fail to generate
/// abort the benchmark; agent errors inside an episode become action-cap
/// terminations.
pub fn run_benchmark(
    agent: &dyn Agent,
    scenario: Scenario,
    n_objects: usize,
    n_scenes: usize,
    base_seed: u64,
    cfg: &RunConfig,
) -> Result<(Vec<EpisodeRecord>, MetricsReport)> {
    let records: Vec<EpisodeRecord> = (0..n_scenes as u64)
        .into_par_iter()
        .map(|i| {
            let seed = benchmark_scene_seed(base_seed, scenario, n_objects, i);
            let scene = spawn_scene(scenario, n_objects, seed, &cfg.sim)?;
            Ok(run_episode(scene, agent, cfg, EpisodeMeta { scenario, n_objects, seed }))
        })
        .collect::<Result<_>>()?;
    let report = MetricsReport::from_records(&records);
    Ok((records, report))
}

/// Outcome of pushing once on held-out packed scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PushEfficacy {
    pub scenes: usize,
    pub trained_improved: usize,
    pub random_improved: usize,
}

impl PushEfficacy {
    pub fn trained_rate(&self) -> f64 {
        self.trained_improved as f64 / self.scenes.max(1) as f64
    }
    pub fn random_rate(&self) -> f64 {
        self.random_improved as f64 / self.scenes.max(1) as f64
    }
}

/// Paired measurement: on each scene, one greedy object-masked push and one
/// uniformly random object push are executed from the same start state, and
/// each counts when the goal-masked grasp maximum strictly increases.
pub fn push_efficacy(nets: &DualNet, scenario: Scenario, n_objects: usize, n_scenes: usize, base_seed: u64, cfg: &RunConfig) -> Result<PushEfficacy> {
    let outcomes: Vec<(bool, bool)> = (0..n_scenes as u64)
        .into_par_iter()
        .map(|i| -> Result<(bool, bool)> {
            let seed = benchmark_scene_seed(base_seed, scenario, n_objects, i);
            let scene = spawn_scene(scenario, n_objects, seed, &cfg.sim)?;
            let obs = render(&scene, cfg.perception.resolution, cfg.sim.max_height);
            let stack = build_rotated_stack(&obs);
            let gq = q_maps(&nets.grasp, Primitive::Grasp, &stack)?;
            let pre = gq.goal_masked_max(&stack).unwrap_or(0.0);
            let pq = q_maps(&nets.push, Primitive::Push, &stack)?;
            let greedy = pq.argmax_where(|k, u, v| stack.views[k].all_mask.get(u, v));
            let mut rng = seeded(derive_seed(seed, &[0x9a5]));
            let random = random_object_action(&obs, Primitive::Push, &mut rng);
            let improves = |k: usize, u: usize, v: usize| -> Result<bool> {
                let pose = decode_pixel(k, u, v, stack.resolution())?;
                let cmd = PushCommand {
                    start: pose.position(),
                    direction_index: k,
                    distance: cfg.sim.push_distance,
                };
                let (next, _) = step_push(&scene, &cmd, &cfg.sim);
                let nobs = render(&next, cfg.perception.resolution, cfg.sim.max_height);
                let nstack = build_rotated_stack(&nobs);
                let post = q_maps(&nets.grasp, Primitive::Grasp, &nstack)?.goal_masked_max(&nstack).unwrap_or(0.0);
                Ok(post - pre > 0.0)
            };
            let t = match greedy {
                Some((k, u, v, _)) => improves(k, u, v)?,
                None => false,
            };
            let r = match random {
                Some(a) => improves(a.k, a.u, a.v)?,
                None => false,
            };
            Ok((t, r))
        })
        .collect::<Result<_>>()?;
    Ok(PushEfficacy {
        scenes: outcomes.len(),
        trained_improved: outcomes.iter().filter(|o| o.0).count(),
        random_improved: outcomes.iter().filter(|o| o.1).count(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    /// `y₀ = x₀`, `yₜ = α·yₜ₋₁ + (1−α)·xₜ`.
    Exponential(f64),
    /// Centred mean over `window` samples, truncated at the edges.
    Rolling(usize),
}

pub fn smooth(series: &[f64], method: Smoothing) -> Vec<f64> {
    match method {
        Smoothing::Exponential(alpha) => {
            let mut out = Vec::with_capacity(series.len());
            for (t, &x) in series.iter().enumerate() {
                let y = if t == 0 { x } else { alpha * out[t - 1] + (1.0 - alpha) * x };
                out.push(y);
            }
            out
        }
        Smoothing::Rolling(window) => {
            let w = window.max(1);
            let n = series.len();
            let mut prefix = vec![0.0; n + 1];
            for i in 0..n {
                prefix[i + 1] = prefix[i] + series[i];
            }
            (0..n)
                .map(|t| {
                    let lo = t.saturating_sub(w / 2);
                    let hi = (t + (w - 1) / 2).min(n - 1);
                    (prefix[hi + 1] - prefix[lo]) / (hi + 1 - lo) as f64
                })
                .collect()
        }
    }
}

/// Mean of the last `window` values (all of them when shorter).
pub fn trailing_mean(series: &[f64], window: usize) -> Option<f64> {
    let tail = &series[series.len().saturating_sub(window)..];
    (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(completed: bool, attempts: usize, successes: usize, pushes: usize) -> EpisodeRecord {
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

    #[test]
    fn metric_examples() {
        let rs = [record(true, 1, 1, 1), record(true, 2, 1, 3), record(false, 5, 0, 7)];
        assert_eq!(completion(&rs).unwrap().mean, 2.0 / 3.0);
        assert_eq!(motion_number(&rs).unwrap().mean, 2.0);
        let rs = [record(true, 4, 1, 0), record(false, 6, 3, 0)];
        assert_eq!(grasp_success(&rs).unwrap().mean, 0.4);
        assert!(motion_number(&[record(false, 5, 0, 2)]).is_none());
        assert!(completion(&[record(true, 1, 1, 0)]).unwrap().stderr.is_none());
    }

    #[test]
    fn smoothing_on_constants() {
        let xs = vec![2.5; 30];
        assert_eq!(smooth(&xs, Smoothing::Exponential(0.9)), xs);
        assert_eq!(smooth(&xs, Smoothing::Rolling(7)), xs);
    }

    #[test]
    fn rolling_window_bounds() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let ys = smooth(&xs, Smoothing::Rolling(3));
        assert_eq!(ys[0], 0.5);
        assert_eq!(ys[5], 5.0);
        assert_eq!(ys[9], 8.5);
    }
}
