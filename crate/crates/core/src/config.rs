//! Run configuration: every tunable default, addressable through flat
//! hierarchical keys (`sim.*`, `perception.*`, `net.*`, `learn.*`, `eval.*`).
//!
//! The effective configuration is defaults, then a `key = value` file, then
//! `PUSHGRASP_*` environment variables, then explicit `--set` overrides.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Prefix of environment-variable overrides, e.g. `PUSHGRASP_NET_GRASP_THRESHOLD`.
pub const ENV_PREFIX: &str = "PUSHGRASP_";

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub push_distance: f64,
    pub pusher_radius: f64,
    /// Largest pusher advance per quasi-static substep.
    pub push_substep: f64,
    pub jaw_open_width: f64,
    pub finger_thickness: f64,
    pub finger_length: f64,
    pub contact_tolerance: f64,
    pub max_resolve_iterations: usize,
    /// Object centres are clamped to `[margin, 1 - margin]`.
    pub workspace_margin: f64,
    /// Height that maps to depth 1.0.
    pub max_height: f64,
    pub height_min: f64,
    pub height_max: f64,
    pub square_half: f64,
    pub rect_half_short: f64,
    pub rect_half_long: f64,
    pub disc_radius: f64,
    pub packed_gap_min: f64,
    pub packed_gap_max: f64,
    pub packed_angle_jitter: f64,
    pub packed_position_jitter: f64,
    pub pile_noise: f64,
    pub pile_settle_step: f64,
    pub sparse_region_min: f64,
    pub sparse_region_max: f64,
    pub sparse_clearance: f64,
    pub change_window: usize,
    pub change_depth_threshold: f64,
    pub change_count_threshold: usize,
    /// Raster resolution for scene-change windows and grasp sweeps (mirrors `perception.resolution`).
    pub resolution: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            push_distance: 0.03,
            pusher_radius: 0.01,
            push_substep: 0.005,
            jaw_open_width: 0.13,
            finger_thickness: 0.02,
            finger_length: 0.06,
            contact_tolerance: 1e-6,
            max_resolve_iterations: 50,
            workspace_margin: 0.05,
            max_height: 0.08,
            height_min: 0.03,
            height_max: 0.07,
            square_half: 0.04,
            rect_half_short: 0.03,
            rect_half_long: 0.055,
            disc_radius: 0.04,
            packed_gap_min: 0.005,
            packed_gap_max: 0.01,
            packed_angle_jitter: 0.03,
            packed_position_jitter: 0.001,
            pile_noise: 0.02,
            pile_settle_step: 0.005,
            sparse_region_min: 0.2,
            sparse_region_max: 0.8,
            sparse_clearance: 0.01,
            change_window: 21,
            change_depth_threshold: 0.02,
            change_count_threshold: 8,
            resolution: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerceptionConfig {
    pub resolution: usize,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self { resolution: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Convolution blocks per tower.
    pub tower_depth: usize,
    /// How many of the leading tower blocks use stride 2.
    pub downsample: usize,
    /// Output channels of every tower block.
    pub tower_width: usize,
    pub head_channels: usize,
    pub pretrained_backbone: bool,
    pub resolution: usize,
    pub grasp_threshold: f64,
    pub bn_momentum: f64,
    pub init_seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            tower_depth: 4,
            downsample: 1,
            tower_width: 8,
            head_channels: 32,
            pretrained_backbone: false,
            resolution: 64,
            grasp_threshold: 1.8,
            bn_momentum: 0.1,
            init_seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSemantics {
    /// Positive push reward requires a detected scene change.
    Corrected,
    /// Rows evaluated exactly as printed, first match wins.
    Literal,
}

impl FromStr for RewardSemantics {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "corrected" => Ok(Self::Corrected),
            "literal" => Ok(Self::Literal),
            _ => Err(format!("expected `corrected` or `literal`, got `{s}`")),
        }
    }
}

impl fmt::Display for RewardSemantics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Corrected => "corrected",
            Self::Literal => "literal",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Packed,
    Pile,
    Sparse,
}

impl FromStr for Scenario {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "packed" => Ok(Self::Packed),
            "pile" => Ok(Self::Pile),
            "sparse" => Ok(Self::Sparse),
            _ => Err(format!("expected `packed`, `pile` or `sparse`, got `{s}`")),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Packed => "packed",
            Self::Pile => "pile",
            Self::Sparse => "sparse",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub discount: f64,
    pub huber_delta: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub epsilon_initial: f64,
    pub epsilon_decay: f64,
    pub epsilon_floor: f64,
    pub q_improvement_threshold: f64,
    pub push_reward_positive: f64,
    pub push_reward_negative: f64,
    pub reward_semantics: RewardSemantics,
    pub episodes_grasp_agnostic: usize,
    pub episodes_grasp_explore: usize,
    pub episodes_push_training: usize,
    pub episodes_alternating: usize,
    pub grasp_objects: usize,
    pub push_scenario: Scenario,
    pub push_objects: usize,
    pub alternating_scenario: Scenario,
    pub alternating_objects: usize,
    pub max_pushes_per_episode: usize,
    /// Action cap of an alternating-stage episode.
    pub episode_action_cap: usize,
    pub checkpoint_every: usize,
    pub calibrate_threshold: bool,
    pub calibration_scenes: usize,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 2e-4,
            discount: 0.5,
            huber_delta: 1.0,
            batch_size: 4,
            replay_capacity: 5000,
            epsilon_initial: 0.5,
            epsilon_decay: 0.9998,
            epsilon_floor: 0.1,
            q_improvement_threshold: 0.1,
            push_reward_positive: 0.5,
            push_reward_negative: -0.5,
            reward_semantics: RewardSemantics::Corrected,
            episodes_grasp_agnostic: 400,
            episodes_grasp_explore: 400,
            episodes_push_training: 200,
            episodes_alternating: 200,
            grasp_objects: 5,
            push_scenario: Scenario::Packed,
            push_objects: 5,
            alternating_scenario: Scenario::Pile,
            alternating_objects: 10,
            max_pushes_per_episode: 5,
            episode_action_cap: 20,
            checkpoint_every: 50,
            calibrate_threshold: true,
            calibration_scenes: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub action_cap: usize,
    pub max_consecutive_failures: usize,
    pub n_scenes: usize,
    pub base_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            action_cap: 30,
            max_consecutive_failures: 5,
            n_scenes: 100,
            base_seed: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub sim: SimConfig,
    pub perception: PerceptionConfig,
    pub net: NetworkConfig,
    pub learn: LearnConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sim: SimConfig::default(),
            perception: PerceptionConfig::default(),
            net: NetworkConfig::default(),
            learn: LearnConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn format_value(&self) -> String;
}

macro_rules! parsed_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse::<$t>().map_err(|e| format!("`{s}`: {e}"))
            }
            fn format_value(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

parsed_value!(f64, usize, u64, bool, RewardSemantics, Scenario);

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+;)*) => {
        impl RunConfig {
            /// Every recognised key, in serialisation order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            fn set_raw(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$($field).+ = ConfigValue::parse_value(value)
                            .map_err(|e| Error::Config(format!("{key}: {e}")))?;
                    })*
                    _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
                }
                Ok(())
            }

            /// `(key, value)` pairs of the effective configuration.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$($field).+.format_value())),*]
            }
        }
    };
}

config_keys! {
    "seed" => seed;
    "sim.push_distance" => sim.push_distance;
    "sim.pusher_radius" => sim.pusher_radius;
    "sim.push_substep" => sim.push_substep;
    "sim.jaw_open_width" => sim.jaw_open_width;
    "sim.finger_thickness" => sim.finger_thickness;
    "sim.finger_length" => sim.finger_length;
    "sim.contact_tolerance" => sim.contact_tolerance;
    "sim.max_resolve_iterations" => sim.max_resolve_iterations;
    "sim.workspace_margin" => sim.workspace_margin;
    "sim.max_height" => sim.max_height;
    "sim.height_min" => sim.height_min;
    "sim.height_max" => sim.height_max;
    "sim.square_half" => sim.square_half;
    "sim.rect_half_short" => sim.rect_half_short;
    "sim.rect_half_long" => sim.rect_half_long;
    "sim.disc_radius" => sim.disc_radius;
    "sim.packed_gap_min" => sim.packed_gap_min;
    "sim.packed_gap_max" => sim.packed_gap_max;
    "sim.packed_angle_jitter" => sim.packed_angle_jitter;
    "sim.packed_position_jitter" => sim.packed_position_jitter;
    "sim.pile_noise" => sim.pile_noise;
    "sim.pile_settle_step" => sim.pile_settle_step;
    "sim.sparse_region_min" => sim.sparse_region_min;
    "sim.sparse_region_max" => sim.sparse_region_max;
    "sim.sparse_clearance" => sim.sparse_clearance;
    "sim.change_window" => sim.change_window;
    "sim.change_depth_threshold" => sim.change_depth_threshold;
    "sim.change_count_threshold" => sim.change_count_threshold;
    "perception.resolution" => perception.resolution;
    "net.tower_depth" => net.tower_depth;
    "net.downsample" => net.downsample;
    "net.tower_width" => net.tower_width;
    "net.head_channels" => net.head_channels;
    "net.pretrained_backbone" => net.pretrained_backbone;
    "net.grasp_threshold" => net.grasp_threshold;
    "net.bn_momentum" => net.bn_momentum;
    "net.init_seed" => net.init_seed;
    "learn.learning_rate" => learn.learning_rate;
    "learn.weight_decay" => learn.weight_decay;
    "learn.discount" => learn.discount;
    "learn.huber_delta" => learn.huber_delta;
    "learn.batch_size" => learn.batch_size;
    "learn.replay_capacity" => learn.replay_capacity;
    "learn.epsilon_initial" => learn.epsilon_initial;
    "learn.epsilon_decay" => learn.epsilon_decay;
    "learn.epsilon_floor" => learn.epsilon_floor;
    "learn.q_improvement_threshold" => learn.q_improvement_threshold;
    "learn.push_reward_positive" => learn.push_reward_positive;
    "learn.push_reward_negative" => learn.push_reward_negative;
    "learn.reward_semantics" => learn.reward_semantics;
    "learn.episodes_grasp_agnostic" => learn.episodes_grasp_agnostic;
    "learn.episodes_grasp_explore" => learn.episodes_grasp_explore;
    "learn.episodes_push_training" => learn.episodes_push_training;
    "learn.episodes_alternating" => learn.episodes_alternating;
    "learn.grasp_objects" => learn.grasp_objects;
    "learn.push_scenario" => learn.push_scenario;
    "learn.push_objects" => learn.push_objects;
    "learn.alternating_scenario" => learn.alternating_scenario;
    "learn.alternating_objects" => learn.alternating_objects;
    "learn.max_pushes_per_episode" => learn.max_pushes_per_episode;
    "learn.episode_action_cap" => learn.episode_action_cap;
    "learn.checkpoint_every" => learn.checkpoint_every;
    "learn.calibrate_threshold" => learn.calibrate_threshold;
    "learn.calibration_scenes" => learn.calibration_scenes;
    "eval.action_cap" => eval.action_cap;
    "eval.max_consecutive_failures" => eval.max_consecutive_failures;
    "eval.n_scenes" => eval.n_scenes;
    "eval.base_seed" => eval.base_seed;
}

impl RunConfig {
    /// Sets one key and re-validates the whole configuration.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_raw(key.trim(), value.trim())?;
        self.sync();
        self.validate()
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set_raw(k.trim(), v.trim())?;
        }
        self.sync();
        self.validate()
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text)
    }

    /// Applies `PUSHGRASP_<KEY>` variables, where `<KEY>` is the key upper-cased with `.` → `_`.
    pub fn apply_env(&mut self) -> Result<()> {
        self.apply_env_from(|name| std::env::var(name).ok())
    }

    pub fn apply_env_from(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        for key in Self::KEYS {
            if let Some(v) = lookup(&env_name(key)) {
                self.set_raw(key, &v)?;
            }
        }
        self.sync();
        self.validate()
    }

    /// Applies a `key=value` override string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        self.set(k, v)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Short stable digest of the serialised configuration.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Hash over the keys that define network architecture and raster geometry.
    pub fn architecture_hash(&self) -> String {
        let text: String = self
            .entries()
            .into_iter()
            .filter(|(k, _)| {
                k.starts_with("net.") && *k != "net.grasp_threshold" && *k != "net.init_seed" || *k == "perception.resolution"
            })
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn sync(&mut self) {
        self.sim.resolution = self.perception.resolution;
        self.net.resolution = self.perception.resolution;
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.sim;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(s.jaw_open_width > s.finger_thickness && s.finger_thickness > 0.0) {
            return bad("sim.jaw_open_width > sim.finger_thickness > 0 required");
        }
        if s.push_distance <= 0.0 || s.pusher_radius <= 0.0 || s.push_substep <= 0.0 {
            return bad("push distance, pusher radius and substep must be positive");
        }
        if s.height_min <= 0.0 || s.height_min > s.height_max || s.height_max > s.max_height {
            return bad("0 < sim.height_min <= sim.height_max <= sim.max_height required");
        }
        if s.square_half <= 0.0 || s.rect_half_short <= 0.0 || s.rect_half_long <= 0.0 || s.disc_radius <= 0.0 {
            return bad("object half extents must be positive");
        }
        if self.perception.resolution < 16 {
            return bad("perception.resolution must be at least 16");
        }
        let n = &self.net;
        if n.tower_depth == 0 || n.downsample > n.tower_depth || n.tower_width == 0 || n.head_channels == 0 {
            return bad("net: need tower_depth >= 1, downsample <= tower_depth, positive widths");
        }
        if self.perception.resolution % (1 << n.downsample) != 0 {
            return bad("perception.resolution must be divisible by 2^net.downsample");
        }
        if n.pretrained_backbone {
            return bad("net.pretrained_backbone requires external backbone weights, which this build does not ship");
        }
        let l = &self.learn;
        if !(0.0..1.0).contains(&l.discount) {
            return bad("learn.discount must lie in [0, 1)");
        }
        if !(l.epsilon_floor <= l.epsilon_initial && l.epsilon_decay > 0.0 && l.epsilon_decay <= 1.0) {
            return bad("learn: need epsilon_floor <= epsilon_initial and 0 < epsilon_decay <= 1");
        }
        if l.replay_capacity == 0 {
            return bad("learn.replay_capacity must be positive");
        }
        Ok(())
    }
}

/// Environment variable consulted for `key`.
pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.replace('.', "_").to_uppercase())
}
