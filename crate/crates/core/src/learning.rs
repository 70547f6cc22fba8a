//! Rewards, TD targets, replay and the staged training curriculum.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{LearnConfig, RewardSemantics, RunConfig, Scenario};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nn::{AdamConfig, NetInput, PixelTarget};
use crate::perception::{build_rotated_stack, render, rotate_observation, Observation};
use crate::policy::{
    explore_action, q_maps, select_action, select_grasp, view_input, ActionSpec, CheckpointMeta, DualNet, ExplorationSchedule, GraspSupport, Mode, NetId,
    Primitive, QMapStack, Stage, CHECKPOINT_VERSION,
};
use crate::rng::{derive_seed, seeded, SimRng};
use crate::sim::{spawn_scene, step_grasp, step_push, GraspCommand, GraspResult, ObjectBody, PushCommand, Scene, Workspace};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardComputer {
    pub q_improvement_threshold: f64,
    pub push_reward_positive: f64,
    pub push_reward_negative: f64,
    pub semantics: RewardSemantics,
}

impl RewardComputer {
    pub fn from_config(cfg: &LearnConfig) -> Self {
        Self {
            q_improvement_threshold: cfg.q_improvement_threshold,
            push_reward_positive: cfg.push_reward_positive,
            push_reward_negative: cfg.push_reward_negative,
            semantics: cfg.reward_semantics,
        }
    }

    /// `(reward, effective goal)`. With relabeling any grasped object becomes the goal.
    pub fn grasp_reward(&self, result: &GraspResult, goal_id: u32, relabeling: bool) -> (f64, u32) {
        match result.grasped() {
            Some(id) if relabeling => (1.0, id),
            Some(id) if id == goal_id => (1.0, goal_id),
            _ => (0.0, goal_id),
        }
    }

    pub fn push_reward(&self, q_improved: f64, changed: bool) -> f64 {
        let improved = q_improved > self.q_improvement_threshold;
        match self.semantics {
            RewardSemantics::Corrected => {
                if !changed {
                    self.push_reward_negative
                } else if improved {
                    self.push_reward_positive
                } else {
                    0.0
                }
            }
            RewardSemantics::Literal => {
                if improved && !changed {
                    self.push_reward_positive
                } else if !changed {
                    self.push_reward_negative
                } else {
                    0.0
                }
            }
        }
    }
}

/// Change of the goal-masked grasp maximum caused by a push.
pub fn q_improved(q_pre: f64, q_post: f64) -> f64 {
    q_post - q_pre
}

pub fn td_target(reward: f64, terminal: bool, next_grasp_q_max: f64, discount: f64) -> f64 {
    if terminal {
        reward
    } else {
        reward + discount * next_grasp_q_max
    }
}

/// One stored experience. Observations are shared between consecutive
/// transitions.
#[derive(Debug, Clone)]
pub struct Transition {
    /// Scene the observation was rendered from; kept so the buffer can be
    /// persisted compactly and re-rendered.
    pub scene: Arc<Scene>,
    pub next_scene: Option<Arc<Scene>>,
    pub observation: Arc<Observation>,
    pub goal_id: u32,
    /// Goal mask fed to the network when it differs from the observation's
    /// own (hindsight relabeling).
    pub goal_mask: Option<Grid<bool>>,
    pub action: ActionSpec,
    pub reward: f64,
    pub next_observation: Option<Arc<Observation>>,
    pub terminal: bool,
    pub stage: Stage,
    pub relabeled: bool,
    pub grasp_result: Option<GraspResult>,
    /// Original goal before relabeling.
    pub original_goal_id: u32,
    pub q_improved: Option<f64>,
    pub scene_changed: Option<bool>,
    /// Goal-masked grasp maximum on the next observation at storage time.
    pub next_grasp_q_max: f64,
}

impl Transition {
    /// Reward recomputed from the stored fields.
    pub fn recompute_reward(&self, rc: &RewardComputer) -> f64 {
        match self.action.primitive {
            Primitive::Grasp => {
                let result = self.grasp_result.expect("grasp transitions store their result");
                rc.grasp_reward(&result, self.original_goal_id, self.relabeled).0
            }
            Primitive::Push => rc.push_reward(
                self.q_improved.expect("push transitions store q_improved"),
                self.scene_changed.expect("push transitions store the change flag"),
            ),
        }
    }

    pub fn target(&self, discount: f64) -> f64 {
        td_target(self.reward, self.terminal, self.next_grasp_q_max, discount)
    }

    /// Network input for the executed rotation.
    pub fn input(&self) -> NetInput {
        let view = match &self.goal_mask {
            Some(mask) => rotate_observation(&self.observation.with_goal_mask(mask.clone()), self.action.k),
            None => rotate_observation(&self.observation, self.action.k),
        };
        view_input(&view)
    }
}

/// FIFO ring of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Arc<Transition>>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1024)),
        }
    }

    pub fn push(&mut self, t: Transition) -> Arc<Transition> {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        let t = Arc::new(t);
        self.items.push_back(t.clone());
        t
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<Transition>> {
        self.items.iter()
    }

    /// Up to `n` distinct transitions drawn uniformly from all but the newest `exclude_newest`.
    pub fn sample(&self, n: usize, exclude_newest: usize, rng: &mut impl Rng) -> Vec<Arc<Transition>> {
        let pool = self.items.len().saturating_sub(exclude_newest);
        let n = n.min(pool);
        sample(rng, pool, n).into_iter().map(|i| self.items[i].clone()).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct StoredTransition {
    workspace: Workspace,
    rng_seed: u64,
    objects: Vec<ObjectBody>,
    next_objects: Option<Vec<ObjectBody>>,
    goal_id: u32,
    action: ActionSpec,
    reward: f64,
    terminal: bool,
    stage: Stage,
    relabeled: bool,
    grasp_result: Option<GraspResult>,
    original_goal_id: u32,
    q_improved: Option<f64>,
    scene_changed: Option<bool>,
    next_grasp_q_max: f64,
}

impl ReplayBuffer {
    /// One JSON line per transition, oldest first. Observations are not
    /// stored; they are re-rendered from the scenes on load.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for t in &self.items {
            let line = StoredTransition {
                workspace: t.scene.workspace,
                rng_seed: t.scene.rng_seed,
                objects: t.scene.objects.clone(),
                next_objects: t.next_scene.as_ref().map(|s| s.objects.clone()),
                goal_id: t.goal_id,
                action: t.action,
                reward: t.reward,
                terminal: t.terminal,
                stage: t.stage,
                relabeled: t.relabeled,
                grasp_result: t.grasp_result,
                original_goal_id: t.original_goal_id,
                q_improved: t.q_improved,
                scene_changed: t.scene_changed,
                next_grasp_q_max: t.next_grasp_q_max,
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str, capacity: usize, cfg: &RunConfig) -> Result<Self> {
        let mut buf = Self::new(capacity);
        let res = cfg.perception.resolution;
        let max_height = cfg.sim.max_height;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let st: StoredTransition = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            let scene = Arc::new(Scene {
                objects: st.objects,
                workspace: st.workspace,
                rng_seed: st.rng_seed,
                certificate: None,
            });
            let next_scene = st.next_objects.map(|objects| {
                Arc::new(Scene {
                    objects,
                    workspace: st.workspace,
                    rng_seed: st.rng_seed,
                    certificate: None,
                })
            });
            let observation = Arc::new(render(&scene, res, max_height));
            let goal_mask = st.relabeled.then(|| observation.object_mask(st.goal_id));
            buf.push(Transition {
                next_observation: next_scene.as_ref().map(|s| Arc::new(render(s, res, max_height))),
                scene,
                next_scene,
                observation,
                goal_id: st.goal_id,
                goal_mask,
                action: st.action,
                reward: st.reward,
                terminal: st.terminal,
                stage: st.stage,
                relabeled: st.relabeled,
                grasp_result: st.grasp_result,
                original_goal_id: st.original_goal_id,
                q_improved: st.q_improved,
                scene_changed: st.scene_changed,
                next_grasp_q_max: st.next_grasp_q_max,
            });
        }
        Ok(buf)
    }
}

/// Per-stage settings.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub stage: Stage,
    pub scenario: Scenario,
    pub n_objects: usize,
    pub episode_budget: usize,
    pub relabeling: bool,
    pub grasp_net_frozen: bool,
    pub max_pushes_per_episode: usize,
}

impl StagePlan {
    pub fn for_stage(stage: Stage, cfg: &LearnConfig) -> Self {
        let (scenario, n_objects, episode_budget) = match stage {
            Stage::GraspAgnostic => (Scenario::Sparse, cfg.grasp_objects, cfg.episodes_grasp_agnostic),
            Stage::GraspExplore => (Scenario::Sparse, cfg.grasp_objects, cfg.episodes_grasp_explore),
            Stage::PushTraining => (cfg.push_scenario, cfg.push_objects, cfg.episodes_push_training),
            Stage::Alternating => (cfg.alternating_scenario, cfg.alternating_objects, cfg.episodes_alternating),
        };
        Self {
            stage,
            scenario,
            n_objects,
            episode_budget,
            relabeling: stage == Stage::GraspAgnostic,
            grasp_net_frozen: stage == Stage::PushTraining,
            max_pushes_per_episode: cfg.max_pushes_per_episode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub net: NetId,
    pub loss: Option<f64>,
    pub batch: usize,
}

/// One line of the action log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub run_id: String,
    pub stage: Stage,
    pub episode: u64,
    pub step: u64,
    pub primitive: Option<Primitive>,
    pub k: Option<usize>,
    pub u: Option<usize>,
    pub v: Option<usize>,
    pub q_value: Option<f64>,
    pub reward: Option<f64>,
    pub epsilon: f64,
    /// Whether a grasp lifted any object (`None` for pushes).
    pub grasp_success: Option<bool>,
    pub goal_grasped: Option<bool>,
    pub scene_seed: u64,
    pub updates: Vec<UpdateRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<String>,
}

/// One line of the episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub run_id: String,
    pub stage: Stage,
    pub episode: u64,
    pub scene_seed: u64,
    pub actions: usize,
    pub pushes: usize,
    pub grasp_attempts: usize,
    pub goal_grasped: bool,
    /// Stage success signal: any grasp in grasp_agnostic, the goal grasp otherwise.
    pub success: bool,
    pub epsilon: f64,
    pub grasp_threshold: f64,
    /// Set when the episode could not run, e.g. scene generation failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<String>,
}

/// Receives training output.
pub trait TrainSink {
    fn action(&mut self, _record: &ActionRecord) -> Result<()> {
        Ok(())
    }
    fn episode(&mut self, _record: &EpisodeLog) -> Result<()> {
        Ok(())
    }
    /// Called at the checkpoint cadence with the full trainer state.
    fn checkpoint(&mut self, _trainer: &Trainer, _meta: &CheckpointMeta) -> Result<()> {
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;

impl TrainSink for NullSink {}

/// Keeps records in memory.
#[derive(Default)]
pub struct MemorySink {
    pub actions: Vec<ActionRecord>,
    pub episodes: Vec<EpisodeLog>,
    pub checkpoints: Vec<CheckpointMeta>,
}

impl TrainSink for MemorySink {
    fn action(&mut self, r: &ActionRecord) -> Result<()> {
        self.actions.push(r.clone());
        Ok(())
    }
    fn episode(&mut self, r: &EpisodeLog) -> Result<()> {
        self.episodes.push(r.clone());
        Ok(())
    }
    fn checkpoint(&mut self, _trainer: &Trainer, meta: &CheckpointMeta) -> Result<()> {
        self.checkpoints.push(meta.clone());
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub episodes: usize,
    pub successes: usize,
    pub updates: u64,
    pub quarantined: usize,
    pub grasp_threshold: f64,
}

fn stage_tag(stage: Stage) -> u64 {
    Stage::ALL.iter().position(|&s| s == stage).expect("known stage") as u64
}

/// Seed of the scene used by `episode` of `stage`.
pub fn episode_scene_seed(run_seed: u64, stage: Stage, episode: u64) -> u64 {
    derive_seed(run_seed, &[stage_tag(stage), episode])
}

/// Mutable training state: networks, replay buffers and counters.
pub struct Trainer {
    pub cfg: RunConfig,
    pub run_id: String,
    pub nets: DualNet,
    pub grasp_buffer: ReplayBuffer,
    pub push_buffer: ReplayBuffer,
    /// Actions taken in the run; drives ε.
    pub actions_taken: u64,
    /// Optimizer updates applied in the run.
    pub updates: u64,
    pub quarantine: Vec<Transition>,
    rewards: RewardComputer,
    adam: AdamConfig,
    schedule: ExplorationSchedule,
}

struct Step {
    record: ActionRecord,
    done: bool,
    goal_grasped: bool,
    grasped_any: bool,
}

impl Trainer {
    pub fn new(cfg: RunConfig, run_id: impl Into<String>) -> Result<Self> {
        let nets = DualNet::new(&cfg.net)?;
        Ok(Self::with_nets(cfg, run_id, nets))
    }

    pub fn with_nets(cfg: RunConfig, run_id: impl Into<String>, nets: DualNet) -> Self {
        let l = &cfg.learn;
        Self {
            run_id: run_id.into(),
            grasp_buffer: ReplayBuffer::new(l.replay_capacity),
            push_buffer: ReplayBuffer::new(l.replay_capacity),
            actions_taken: 0,
            updates: 0,
            quarantine: Vec::new(),
            rewards: RewardComputer::from_config(l),
            adam: AdamConfig::new(l.learning_rate, l.weight_decay),
            schedule: ExplorationSchedule {
                initial: l.epsilon_initial,
                decay: l.epsilon_decay,
                floor: l.epsilon_floor,
            },
            nets,
            cfg,
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.schedule.epsilon(self.actions_taken)
    }

    pub fn reward_computer(&self) -> RewardComputer {
        self.rewards
    }

    fn observe(&self, scene: &Scene) -> Observation {
        render(scene, self.cfg.perception.resolution, self.cfg.sim.max_height)
    }

    /// One optimizer step for `net` on the newest transitions plus a replay sample.
    fn update(&mut self, net: NetId, newest: &[Arc<Transition>], rng: &mut SimRng) -> Option<UpdateRecord> {
        let buffer = match net {
            Primitive::Grasp => &self.grasp_buffer,
            Primitive::Push => &self.push_buffer,
        };
        let mut batch: Vec<Arc<Transition>> = buffer.sample(self.cfg.learn.batch_size, newest.len(), rng);
        batch.extend(newest.iter().cloned());
        if batch.is_empty() {
            return None;
        }
        let inputs: Vec<NetInput> = batch.iter().map(|t| t.input()).collect();
        let refs: Vec<&NetInput> = inputs.iter().collect();
        let input = NetInput::stack(&refs);
        let discount = self.cfg.learn.discount;
        let targets: Vec<PixelTarget> = batch
            .iter()
            .enumerate()
            .map(|(i, t)| PixelTarget {
                index: i,
                u: t.action.u,
                v: t.action.v,
                target: t.target(discount),
            })
            .collect();
        let delta = self.cfg.learn.huber_delta;
        let adam = self.adam;
        match self.nets.net_mut(net).train_step(&input, &targets, delta, &adam) {
            Ok(loss) => {
                self.updates += 1;
                Some(UpdateRecord {
                    net,
                    loss: Some(loss),
                    batch: batch.len(),
                })
            }
            Err(_) => {
                for t in newest {
                    self.quarantine.push((**t).clone());
                }
                Some(UpdateRecord {
                    net,
                    loss: None,
                    batch: batch.len(),
                })
            }
        }
    }

    fn grasp_q(&self, stack: &crate::perception::RotatedStack) -> Result<QMapStack> {
        q_maps(&self.nets.grasp, Primitive::Grasp, stack)
    }

    fn base_record(&self, stage: Stage, episode: u64, step: u64, scene_seed: u64, epsilon: f64) -> ActionRecord {
        ActionRecord {
            run_id: self.run_id.clone(),
            stage,
            episode,
            step,
            primitive: None,
            k: None,
            u: None,
            v: None,
            q_value: None,
            reward: None,
            epsilon,
            grasp_success: None,
            goal_grasped: None,
            scene_seed,
            updates: Vec::new(),
            event: None,
        }
    }

    fn fill_action(record: &mut ActionRecord, a: &ActionSpec) {
        record.primitive = Some(a.primitive);
        record.k = Some(a.k);
        record.u = Some(a.u);
        record.v = Some(a.v);
        record.q_value = Some(a.q_value);
    }

    /// Executes a grasp and stores its transition(s); trains the grasp net unless frozen.
    #[allow(clippy::too_many_arguments)]
    fn do_grasp(
        &mut self,
        scene: &mut Scene,
        obs: Arc<Observation>,
        action: ActionSpec,
        plan: &StagePlan,
        mut record: ActionRecord,
        rng: &mut SimRng,
        train: bool,
    ) -> Step {
        let goal_id = scene.goal_id().expect("episodes run while the goal is present");
        let before = Arc::new(scene.clone());
        let cmd = GraspCommand::with_config(action.pose.position(), action.k, &self.cfg.sim);
        let (next, result) = step_grasp(scene, &cmd);
        *scene = next;
        let grasped = result.grasped();
        let goal_grasped = grasped == Some(goal_id);
        let (reward, _) = self.rewards.grasp_reward(&result, goal_id, false);
        Self::fill_action(&mut record, &action);
        record.reward = Some(reward);
        record.grasp_success = Some(grasped.is_some());
        record.goal_grasped = Some(goal_grasped);
        if train && !plan.grasp_net_frozen {
            let base = Transition {
                scene: before.clone(),
                next_scene: None,
                observation: obs.clone(),
                goal_id,
                goal_mask: None,
                action,
                reward,
                next_observation: None,
                terminal: true,
                stage: plan.stage,
                relabeled: false,
                grasp_result: Some(result),
                original_goal_id: goal_id,
                q_improved: None,
                scene_changed: None,
                next_grasp_q_max: 0.0,
            };
            let mut newest = vec![self.grasp_buffer.push(base)];
            if plan.relabeling {
                if let Some(id) = grasped.filter(|&id| id != goal_id) {
                    let (r, effective) = self.rewards.grasp_reward(&result, goal_id, true);
                    let relabeled = Transition {
                        scene: before.clone(),
                        next_scene: None,
                        observation: obs.clone(),
                        goal_id: effective,
                        goal_mask: Some(obs.object_mask(id)),
                        action,
                        reward: r,
                        next_observation: None,
                        terminal: true,
                        stage: plan.stage,
                        relabeled: true,
                        grasp_result: Some(result),
                        original_goal_id: goal_id,
                        q_improved: None,
                        scene_changed: None,
                        next_grasp_q_max: 0.0,
                    };
                    newest.push(self.grasp_buffer.push(relabeled));
                }
            }
            if let Some(u) = self.update(Primitive::Grasp, &newest, rng) {
                if u.loss.is_none() {
                    record.event = Some("non-finite grasp loss; update rejected and transition quarantined".into());
                }
                record.updates.push(u);
            }
        }
        Step {
            record,
            done: goal_grasped,
            goal_grasped,
            grasped_any: grasped.is_some(),
        }
    }

    /// Executes a push, computes its reward from the grasp-Q change and scene
    /// change, stores the transition and trains the push net.
    #[allow(clippy::too_many_arguments)]
    fn do_push(
        &mut self,
        scene: &mut Scene,
        obs: Arc<Observation>,
        q_pre: f64,
        action: ActionSpec,
        plan: &StagePlan,
        mut record: ActionRecord,
        rng: &mut SimRng,
    ) -> Result<(Step, Arc<Observation>, QMapStack, crate::perception::RotatedStack)> {
        let goal_id = scene.goal_id().expect("episodes run while the goal is present");
        let before = Arc::new(scene.clone());
        let cmd = PushCommand {
            start: action.pose.position(),
            direction_index: action.k,
            distance: self.cfg.sim.push_distance,
        };
        let (next, change) = step_push(scene, &cmd, &self.cfg.sim);
        *scene = next;
        let next_obs = Arc::new(self.observe(scene));
        let next_stack = build_rotated_stack(&next_obs);
        let next_q = self.grasp_q(&next_stack)?;
        let q_post = next_q.goal_masked_max(&next_stack).unwrap_or(0.0);
        let improvement = q_improved(q_pre, q_post);
        let reward = self.rewards.push_reward(improvement, change.changed);
        Self::fill_action(&mut record, &action);
        record.reward = Some(reward);
        let t = Transition {
            scene: before,
            next_scene: Some(Arc::new(scene.clone())),
            observation: obs,
            goal_id,
            goal_mask: None,
            action,
            reward,
            next_observation: Some(next_obs.clone()),
            terminal: false,
            stage: plan.stage,
            relabeled: false,
            grasp_result: None,
            original_goal_id: goal_id,
            q_improved: Some(improvement),
            scene_changed: Some(change.changed),
            next_grasp_q_max: q_post,
        };
        let newest = vec![self.push_buffer.push(t)];
        if let Some(u) = self.update(Primitive::Push, &newest, rng) {
            if u.loss.is_none() {
                record.event = Some("non-finite push loss; update rejected and transition quarantined".into());
            }
            record.updates.push(u);
        }
        let step = Step {
            record,
            done: false,
            goal_grasped: false,
            grasped_any: false,
        };
        Ok((step, next_obs, next_q, next_stack))
    }

    /// Runs one episode of `plan`.
    pub fn run_episode(&mut self, plan: &StagePlan, episode: u64, sink: &mut dyn TrainSink) -> Result<EpisodeLog> {
        let scene_seed = episode_scene_seed(self.cfg.seed, plan.stage, episode);
        let mut rng = seeded(derive_seed(scene_seed, &[0xac71]));
        let spawned = spawn_scene(plan.scenario, plan.n_objects, scene_seed, &self.cfg.sim);
        let mut log = EpisodeLog {
            run_id: self.run_id.clone(),
            stage: plan.stage,
            episode,
            scene_seed,
            actions: 0,
            pushes: 0,
            grasp_attempts: 0,
            goal_grasped: false,
            success: false,
            epsilon: self.epsilon(),
            grasp_threshold: self.nets.grasp_threshold,
            event: None,
        };
        let mut scene = match spawned {
            Ok(s) => s,
            Err(e) => {
                log.event = Some(format!("scene generation failed: {e}"));
                return Ok(log);
            }
        };
        match plan.stage {
            Stage::GraspAgnostic | Stage::GraspExplore => {
                let obs = Arc::new(self.observe(&scene));
                let stack = build_rotated_stack(&obs);
                let q = self.grasp_q(&stack)?;
                let eps = self.epsilon();
                let support = if plan.relabeling { GraspSupport::AnyObject } else { GraspSupport::Goal };
                let record = self.base_record(plan.stage, episode, 0, scene_seed, eps);
                if let Some(a) = select_grasp(&q, &stack, Mode::Train, eps, support, &mut rng) {
                    self.actions_taken += 1;
                    let step = self.do_grasp(&mut scene, obs, a, plan, record, &mut rng, true);
                    log.actions = 1;
                    log.grasp_attempts = 1;
                    log.goal_grasped = step.goal_grasped;
                    log.success = if plan.relabeling { step.grasped_any } else { step.goal_grasped };
                    sink.action(&step.record)?;
                }
            }
            Stage::PushTraining => {
                let mut obs = Arc::new(self.observe(&scene));
                let mut stack = build_rotated_stack(&obs);
                let mut gq = self.grasp_q(&stack)?;
                let push_net = Primitive::Push;
                for step_idx in 0..=plan.max_pushes_per_episode as u64 {
                    let eps = self.epsilon();
                    let record = self.base_record(plan.stage, episode, step_idx, scene_seed, eps);
                    let goal_max = gq.goal_masked_max(&stack);
                    let must_grasp = step_idx as usize == plan.max_pushes_per_episode;
                    let action = if must_grasp || goal_max.is_some_and(|g| g > self.nets.grasp_threshold) {
                        gq.argmax_where(|k, u, v| stack.views[k].goal_mask.get(u, v)).map(|(k, u, v, q)| ActionSpec {
                            primitive: Primitive::Grasp,
                            k,
                            u,
                            v,
                            q_value: q,
                            pose: crate::perception::decode_pixel(k, u, v, stack.resolution()).expect("in range"),
                        })
                    } else {
                        let pq = q_maps(self.nets.net(push_net), push_net, &stack)?;
                        select_action(&gq, &pq, &stack, Mode::Train, f64::INFINITY, eps, &mut rng)
                    };
                    let Some(action) = action else { break };
                    self.actions_taken += 1;
                    log.actions += 1;
                    if action.primitive == Primitive::Grasp {
                        log.grasp_attempts += 1;
                        let step = self.do_grasp(&mut scene, obs.clone(), action, plan, record, &mut rng, false);
                        log.goal_grasped = step.goal_grasped;
                        log.success = step.goal_grasped;
                        sink.action(&step.record)?;
                        break;
                    }
                    log.pushes += 1;
                    let q_pre = goal_max.unwrap_or(0.0);
                    let (step, next_obs, next_q, next_stack) = self.do_push(&mut scene, obs, q_pre, action, plan, record, &mut rng)?;
                    sink.action(&step.record)?;
                    obs = next_obs;
                    gq = next_q;
                    stack = next_stack;
                }
            }
            Stage::Alternating => {
                let mut obs = Arc::new(self.observe(&scene));
                let mut stack = build_rotated_stack(&obs);
                let mut gq = self.grasp_q(&stack)?;
                let mut failures = 0;
                for step_idx in 0..self.cfg.learn.episode_action_cap as u64 {
                    let eps = self.epsilon();
                    let record = self.base_record(plan.stage, episode, step_idx, scene_seed, eps);
                    let pq = q_maps(&self.nets.push, Primitive::Push, &stack)?;
                    let goal_max = gq.goal_masked_max(&stack);
                    let action = if rng.gen::<f64>() < eps {
                        explore_action(&gq, &pq, &stack, &mut rng)
                    } else {
                        select_action(&gq, &pq, &stack, Mode::Train, self.nets.grasp_threshold, 0.0, &mut rng)
                    };
                    let Some(action) = action else {
                        break;
                    };
                    self.actions_taken += 1;
                    log.actions += 1;
                    let step = if action.primitive == Primitive::Grasp {
                        log.grasp_attempts += 1;
                        let mut step = self.do_grasp(&mut scene, obs.clone(), action, plan, record, &mut rng, true);
                        // Keep the push net training in lock-step with the grasp net.
                        if let Some(u) = self.update(Primitive::Push, &[], &mut rng) {
                            step.record.updates.push(u);
                        }
                        obs = Arc::new(self.observe(&scene));
                        if !step.done {
                            stack = build_rotated_stack(&obs);
                            gq = self.grasp_q(&stack)?;
                        }
                        step
                    } else {
                        log.pushes += 1;
                        let q_pre = goal_max.unwrap_or(0.0);
                        let (mut step, next_obs, next_q, next_stack) = self.do_push(&mut scene, obs, q_pre, action, plan, record, &mut rng)?;
                        if let Some(u) = self.update(Primitive::Grasp, &[], &mut rng) {
                            step.record.updates.push(u);
                        }
                        obs = next_obs;
                        gq = next_q;
                        stack = next_stack;
                        step
                    };
                    sink.action(&step.record)?;
                    if step.goal_grasped {
                        log.goal_grasped = true;
                        log.success = true;
                        break;
                    }
                    if step.record.primitive == Some(Primitive::Grasp) {
                        failures += 1;
                        if failures >= self.cfg.eval.max_consecutive_failures {
                            break;
                        }
                    }
                }
            }
        }
        log.epsilon = self.epsilon();
        Ok(log)
    }

    pub fn meta(&self, stage: Stage, episode: u64) -> CheckpointMeta {
        CheckpointMeta {
            version: CHECKPOINT_VERSION,
            stage,
            step: self.updates,
            episode,
            actions: self.actions_taken,
            config_hash: self.cfg.hash(),
            architecture_hash: self.cfg.architecture_hash(),
            grasp_threshold: self.nets.grasp_threshold,
        }
    }

    /// Runs episodes `start_episode..budget` of `stage`. Checkpoints every
    /// `learn.checkpoint_every` episodes and at the end. Threshold calibration
    /// runs at the end of grasp_explore and alternating when enabled.
    pub fn run_stage(&mut self, stage: Stage, start_episode: u64, sink: &mut dyn TrainSink) -> Result<StageReport> {
        let plan = StagePlan::for_stage(stage, &self.cfg.learn);
        let every = self.cfg.learn.checkpoint_every.max(1) as u64;
        let mut report = StageReport {
            stage,
            episodes: 0,
            successes: 0,
            updates: 0,
            quarantined: 0,
            grasp_threshold: self.nets.grasp_threshold,
        };
        let updates_before = self.updates;
        let quarantined_before = self.quarantine.len();
        for episode in start_episode..plan.episode_budget as u64 {
            let log = self.run_episode(&plan, episode, sink)?;
            report.episodes += 1;
            report.successes += log.success as usize;
            sink.episode(&log)?;
            let done = episode + 1;
            let last = done == plan.episode_budget as u64;
            if last && matches!(stage, Stage::GraspExplore | Stage::Alternating) && self.cfg.learn.calibrate_threshold {
                let cal = calibrate_threshold(&self.nets, &self.cfg)?;
                self.nets.grasp_threshold = cal.threshold;
            }
            if done % every == 0 || last {
                sink.checkpoint(self, &self.meta(stage, done))?;
            }
        }
        if start_episode >= plan.episode_budget as u64 {
            sink.checkpoint(self, &self.meta(stage, plan.episode_budget as u64))?;
        }
        report.updates = self.updates - updates_before;
        report.quarantined = self.quarantine.len() - quarantined_before;
        report.grasp_threshold = self.nets.grasp_threshold;
        Ok(report)
    }

    /// All four stages in order.
    pub fn run_curriculum(&mut self, sink: &mut dyn TrainSink) -> Result<Vec<StageReport>> {
        Stage::ALL.iter().map(|&s| self.run_stage(s, 0, sink)).collect()
    }
}

/// Result of fitting the grasp threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    pub scenes: usize,
    /// Estimated completion rate at the threshold.
    pub completion: f64,
    /// Estimated pushes per completed scene at the threshold.
    pub motion_number: f64,
}

/// One calibration scene: goal-masked grasp max and greedy-grasp outcome
/// after 0, 1, 2, ... greedy test-mode pushes.
fn calibration_trace(nets: &DualNet, scene: Scene, cfg: &RunConfig, max_pushes: usize) -> Result<Vec<(f64, bool)>> {
    let mut scene = scene;
    let mut trace = Vec::with_capacity(max_pushes + 1);
    for step in 0..=max_pushes {
        let stack = build_rotated_stack(&render(&scene, cfg.perception.resolution, cfg.sim.max_height));
        let gq = q_maps(&nets.grasp, Primitive::Grasp, &stack)?;
        let Some((k, u, v, q)) = gq.argmax_where(|k, u, v| stack.views[k].goal_mask.get(u, v)) else {
            break;
        };
        let pose = crate::perception::decode_pixel(k, u, v, stack.resolution())?;
        let (_, result) = step_grasp(&scene, &GraspCommand::with_config(pose.position(), k, &cfg.sim));
        trace.push((q, result.grasped() == scene.goal_id()));
        if step == max_pushes {
            break;
        }
        let pq = q_maps(&nets.push, Primitive::Push, &stack)?;
        let Some((k, u, v, _)) = pq.argmax_where(|k, u, v| stack.views[k].all_mask.get(u, v)) else {
            break;
        };
        let pose = crate::perception::decode_pixel(k, u, v, stack.resolution())?;
        let cmd = PushCommand {
            start: pose.position(),
            direction_index: k,
            distance: cfg.sim.push_distance,
        };
        scene = step_push(&scene, &cmd, &cfg.sim).0;
    }
    Ok(trace)
}

/// Fits the grasp threshold on the networks' own score scale by simulating
/// the test-mode decision rule on held-out sparse, packed and pile scenes.
///
/// Each scene is rolled forward with greedy pushes; under threshold `t` the
/// agent grasps at the first step whose goal-masked max exceeds `t`. A failed
/// grasp counts as a failed scene, since it leaves the scene unchanged and a
/// greedy agent would repeat it. The threshold with the highest estimated
/// completion wins, ties going to fewer pushes.
pub fn calibrate_threshold(nets: &DualNet, cfg: &RunConfig) -> Result<Calibration> {
    let n = cfg.learn.calibration_scenes.max(3);
    let max_pushes = 2 * cfg.learn.max_pushes_per_episode;
    let mut traces = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let seed = derive_seed(cfg.seed, &[0xca1, i]);
        let scene = match i % 3 {
            0 => spawn_scene(Scenario::Sparse, cfg.learn.grasp_objects, seed, &cfg.sim),
            1 => spawn_scene(cfg.learn.push_scenario, cfg.learn.push_objects, seed, &cfg.sim),
            _ => spawn_scene(cfg.learn.alternating_scenario, cfg.learn.alternating_objects, seed, &cfg.sim),
        };
        let Ok(scene) = scene else { continue };
        traces.push(calibration_trace(nets, scene, cfg, max_pushes)?);
    }
    let mut qs: Vec<f64> = traces.iter().flatten().map(|s| s.0).collect();
    if qs.is_empty() {
        return Err(Error::Config("threshold calibration found no goal pixels".into()));
    }
    qs.sort_by(f64::total_cmp);
    qs.dedup();
    let mut cuts: Vec<f64> = qs.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    cuts.push(qs[0] - 1e-6);
    let mut best: Option<Calibration> = None;
    for &t in &cuts {
        let mut completed = 0usize;
        let mut pushes = 0usize;
        for trace in &traces {
            if let Some(step) = trace.iter().position(|s| s.0 > t) {
                if trace[step].1 {
                    completed += 1;
                    pushes += step;
                }
            }
        }
        let cand = Calibration {
            threshold: t,
            scenes: traces.len(),
            completion: completed as f64 / traces.len() as f64,
            motion_number: if completed > 0 { pushes as f64 / completed as f64 } else { f64::INFINITY },
        };
        let better = match &best {
            None => true,
            Some(b) => cand.completion > b.completion || (cand.completion == b.completion && cand.motion_number < b.motion_number),
        };
        if better {
            best = Some(cand);
        }
    }
    Ok(best.expect("at least one cut"))
}
