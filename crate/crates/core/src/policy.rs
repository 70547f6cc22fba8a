//! Grasp and push Q-networks, masked action selection and checkpoints.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nn::{Architecture, NetInput, QNet, Tensor};
use crate::perception::{decode_pixel, RotatedObs, RotatedStack, ROTATIONS};
use crate::sim::Pose;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Grasp,
    Push,
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Primitive::Grasp => "grasp",
            Primitive::Push => "push",
        })
    }
}

/// Which of the two networks a Q-map came from.
pub type NetId = Primitive;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub primitive: Primitive,
    pub k: usize,
    pub u: usize,
    pub v: usize,
    pub q_value: f64,
    pub pose: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Exploration allowed, no output masking for argmax.
    Train,
    /// Greedy, outputs masked by goal / object masks.
    Test,
}

/// Pixel-wise Q values for all 16 rotated views, indexed `[k][v][u]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QMapStack {
    pub net: NetId,
    pub resolution: usize,
    pub values: Vec<f64>,
}

impl QMapStack {
    pub fn from_tensor(net: NetId, t: &Tensor) -> Result<Self> {
        if t.n != ROTATIONS || t.c != 1 || t.h != t.w {
            return Err(Error::Shape(format!("expected [16, 1, H, H] Q output, got [{}, {}, {}, {}]", t.n, t.c, t.h, t.w)));
        }
        Ok(Self {
            net,
            resolution: t.h,
            values: t.data.clone(),
        })
    }

    pub fn filled(net: NetId, resolution: usize, value: f64) -> Self {
        Self {
            net,
            resolution,
            values: vec![value; ROTATIONS * resolution * resolution],
        }
    }

    #[inline]
    pub fn get(&self, k: usize, u: usize, v: usize) -> f64 {
        let r = self.resolution;
        self.values[(k * r + v) * r + u]
    }

    pub fn set(&mut self, k: usize, u: usize, v: usize, q: f64) {
        let r = self.resolution;
        self.values[(k * r + v) * r + u] = q;
    }

    /// One rotated view as a grid.
    pub fn view(&self, k: usize) -> Grid<f64> {
        let p = self.resolution * self.resolution;
        Grid {
            size: self.resolution,
            data: self.values[k * p..(k + 1) * p].to_vec(),
        }
    }

    /// Argmax over pixels admitted by `allowed`, ties broken by lexicographic `(k, u, v)`.
    pub fn argmax_where(&self, allowed: impl Fn(usize, usize, usize) -> bool) -> Option<(usize, usize, usize, f64)> {
        let mut best: Option<(usize, usize, usize, f64)> = None;
        for k in 0..ROTATIONS {
            for u in 0..self.resolution {
                for v in 0..self.resolution {
                    if !allowed(k, u, v) {
                        continue;
                    }
                    let q = self.get(k, u, v);
                    if best.map_or(true, |b| q > b.3) {
                        best = Some((k, u, v, q));
                    }
                }
            }
        }
        best
    }

    pub fn argmax(&self) -> (usize, usize, usize, f64) {
        self.argmax_where(|_, _, _| true).expect("Q stack is non-empty")
    }

    /// Maximum over the goal-mask pixels of every rotated view (`None` if the mask is empty).
    pub fn goal_masked_max(&self, stack: &RotatedStack) -> Option<f64> {
        self.argmax_where(|k, u, v| stack.views[k].goal_mask.get(u, v)).map(|b| b.3)
    }
}

fn replicate(grid: impl Fn(usize) -> f64, plane: usize) -> Vec<f64> {
    let one: Vec<f64> = (0..plane).map(grid).collect();
    [one.as_slice(), one.as_slice(), one.as_slice()].concat()
}

/// Network input for one rotated view: colour, depth ×3, goal mask ×3.
pub fn view_input(view: &RotatedObs) -> NetInput {
    view_input_with_mask(view, &view.goal_mask)
}

/// Like [`view_input`] with an explicit goal mask (hindsight relabeling).
pub fn view_input_with_mask(view: &RotatedObs, goal_mask: &Grid<bool>) -> NetInput {
    let r = view.depth.size;
    let plane = r * r;
    let t = |data: Vec<f64>| Tensor { n: 1, c: 3, h: r, w: r, data };
    let color: Vec<f64> = view.color.iter().flat_map(|g| g.data.iter().map(|&x| x as f64)).collect();
    NetInput {
        color: t(color),
        depth: t(replicate(|i| view.depth.data[i] as f64, plane)),
        mask: t(replicate(|i| if goal_mask.data[i] { 1.0 } else { 0.0 }, plane)),
    }
}

pub fn stack_input(stack: &RotatedStack) -> NetInput {
    let items: Vec<NetInput> = stack.views.iter().map(view_input).collect();
    let refs: Vec<&NetInput> = items.iter().collect();
    NetInput::stack(&refs)
}

/// Inference over all 16 rotations.
pub fn q_maps(net: &QNet, id: NetId, stack: &RotatedStack) -> Result<QMapStack> {
    QMapStack::from_tensor(id, &net.forward(&stack_input(stack))?)
}

/// `ε_n = max(floor, initial · decay^n)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExplorationSchedule {
    pub initial: f64,
    pub decay: f64,
    pub floor: f64,
}

impl ExplorationSchedule {
    pub fn epsilon(&self, actions_taken: u64) -> f64 {
        let e = self.initial * self.decay.powf(actions_taken as f64);
        e.max(self.floor)
    }
}

fn decode(primitive: Primitive, k: usize, u: usize, v: usize, q: f64, res: usize) -> ActionSpec {
    ActionSpec {
        primitive,
        k,
        u,
        v,
        q_value: q,
        pose: decode_pixel(k, u, v, res).expect("argmax indices are in range"),
    }
}

fn support(stack: &RotatedStack, mask: impl Fn(&RotatedObs) -> &Grid<bool>) -> Vec<(usize, usize, usize)> {
    let r = stack.resolution();
    let mut out = Vec::new();
    for (k, view) in stack.views.iter().enumerate() {
        let m = mask(view);
        for u in 0..r {
            for v in 0..r {
                if m.get(u, v) {
                    out.push((k, u, v));
                }
            }
        }
    }
    out
}

/// Grasp-or-push decision.
///
/// The grasp decision always uses the goal-masked grasp maximum, and the
/// grasp location is its goal-masked argmax. Push locations are masked to
/// objects in test mode only. In train mode, with probability `epsilon` the
/// location is replaced by a uniform draw from the primitive's mask support
/// (goal mask for grasps, object mask for pushes). Returns `None` when
/// nothing can be selected (test mode with empty masks).
pub fn select_action(
    grasp_q: &QMapStack,
    push_q: &QMapStack,
    stack: &RotatedStack,
    mode: Mode,
    grasp_threshold: f64,
    epsilon: f64,
    rng: &mut impl Rng,
) -> Option<ActionSpec> {
    let res = stack.resolution();
    let goal = grasp_q.argmax_where(|k, u, v| stack.views[k].goal_mask.get(u, v));
    let (primitive, greedy) = match goal {
        Some(g) if g.3 > grasp_threshold => (Primitive::Grasp, Some(g)),
        _ => {
            let p = match mode {
                Mode::Test => push_q.argmax_where(|k, u, v| stack.views[k].all_mask.get(u, v)),
                Mode::Train => Some(push_q.argmax()),
            };
            (Primitive::Push, p)
        }
    };
    if mode == Mode::Train && epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        let pool = match primitive {
            Primitive::Grasp => support(stack, |v| &v.goal_mask),
            Primitive::Push => support(stack, |v| &v.all_mask),
        };
        if !pool.is_empty() {
            let (k, u, v) = pool[rng.gen_range(0..pool.len())];
            let q = match primitive {
                Primitive::Grasp => grasp_q.get(k, u, v),
                Primitive::Push => push_q.get(k, u, v),
            };
            return Some(decode(primitive, k, u, v, q, res));
        }
    }
    greedy.map(|(k, u, v, q)| decode(primitive, k, u, v, q, res))
}

/// Joint ε-exploration: a uniformly chosen primitive at a uniform pixel of
/// its mask (goal mask for grasps, all-objects mask for pushes).
pub fn explore_action(grasp_q: &QMapStack, push_q: &QMapStack, stack: &RotatedStack, rng: &mut impl Rng) -> Option<ActionSpec> {
    let primitive = if rng.gen::<bool>() { Primitive::Grasp } else { Primitive::Push };
    let (pool, q) = match primitive {
        Primitive::Grasp => (support(stack, |v| &v.goal_mask), grasp_q),
        Primitive::Push => (support(stack, |v| &v.all_mask), push_q),
    };
    if pool.is_empty() {
        return None;
    }
    let (k, u, v) = pool[rng.gen_range(0..pool.len())];
    Some(decode(primitive, k, u, v, q.get(k, u, v), stack.resolution()))
}

/// Which pixels a grasp-only selection may explore.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraspSupport {
    Goal,
    AnyObject,
}

/// Grasp-only selection used by the grasp training stages: greedy argmax
/// (unmasked in train mode, goal-masked in test mode) with ε-random
/// replacement drawn from `support`.
pub fn select_grasp(
    grasp_q: &QMapStack,
    stack: &RotatedStack,
    mode: Mode,
    epsilon: f64,
    support_kind: GraspSupport,
    rng: &mut impl Rng,
) -> Option<ActionSpec> {
    let res = stack.resolution();
    if mode == Mode::Train && epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        let pool = match support_kind {
            GraspSupport::Goal => support(stack, |v| &v.goal_mask),
            GraspSupport::AnyObject => support(stack, |v| &v.all_mask),
        };
        if !pool.is_empty() {
            let (k, u, v) = pool[rng.gen_range(0..pool.len())];
            return Some(decode(Primitive::Grasp, k, u, v, grasp_q.get(k, u, v), res));
        }
    }
    let best = match mode {
        Mode::Train => Some(grasp_q.argmax()),
        Mode::Test => grasp_q.argmax_where(|k, u, v| stack.views[k].goal_mask.get(u, v)),
    };
    best.map(|(k, u, v, q)| decode(Primitive::Grasp, k, u, v, q, res))
}

/// The grasp and push networks plus the grasp threshold they are used with.
#[derive(Debug, Clone, PartialEq)]
pub struct DualNet {
    pub grasp: QNet,
    pub push: QNet,
    pub grasp_threshold: f64,
}

impl DualNet {
    pub fn new(cfg: &NetworkConfig) -> Result<Self> {
        let grasp = QNet::new(cfg)?;
        let mut push_cfg = cfg.clone();
        push_cfg.init_seed = cfg.init_seed.wrapping_add(1);
        Ok(Self {
            grasp,
            push: QNet::new(&push_cfg)?,
            grasp_threshold: cfg.grasp_threshold,
        })
    }

    pub fn net(&self, id: NetId) -> &QNet {
        match id {
            Primitive::Grasp => &self.grasp,
            Primitive::Push => &self.push,
        }
    }

    pub fn net_mut(&mut self, id: NetId) -> &mut QNet {
        match id {
            Primitive::Grasp => &mut self.grasp,
            Primitive::Push => &mut self.push,
        }
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"PGQNETS\0";

/// Training stage a checkpoint was taken in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    GraspAgnostic,
    GraspExplore,
    PushTraining,
    Alternating,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::GraspAgnostic, Stage::GraspExplore, Stage::PushTraining, Stage::Alternating];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::GraspAgnostic => "grasp_agnostic",
            Stage::GraspExplore => "grasp_explore",
            Stage::PushTraining => "push_training",
            Stage::Alternating => "alternating",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}` (expected grasp_agnostic, grasp_explore, push_training or alternating)")))
    }
}

/// Plain-text sidecar written next to a checkpoint blob.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub version: u32,
    pub stage: Stage,
    /// Optimizer updates so far in the run.
    pub step: u64,
    /// Episodes completed in `stage`.
    pub episode: u64,
    /// Actions taken so far in the run (drives the ε schedule).
    pub actions: u64,
    pub config_hash: String,
    pub architecture_hash: String,
    pub grasp_threshold: f64,
}

impl CheckpointMeta {
    pub fn to_text(&self) -> String {
        format!(
            "version = {}\nstage = {}\nstep = {}\nepisode = {}\nactions = {}\nconfig_hash = {}\narchitecture_hash = {}\ngrasp_threshold = {}\n",
            self.version, self.stage, self.step, self.episode, self.actions, self.config_hash, self.architecture_hash, self.grasp_threshold
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| map.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("metadata lacks `{k}`")));
        let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|e| Error::Checkpoint(format!("metadata `{k}`: {e}"))) };
        let version = num("version")? as u32;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        Ok(Self {
            version,
            stage: get("stage")?.parse()?,
            step: num("step")?,
            episode: num("episode")?,
            actions: num("actions")?,
            config_hash: get("config_hash")?,
            architecture_hash: get("architecture_hash")?,
            grasp_threshold: get("grasp_threshold")?
                .parse()
                .map_err(|e| Error::Checkpoint(format!("metadata `grasp_threshold`: {e}")))?,
        })
    }
}

/// Sidecar path for a checkpoint blob.
pub fn meta_path(blob: &Path) -> PathBuf {
    let mut p = blob.as_os_str().to_owned();
    p.push(".meta");
    PathBuf::from(p)
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, x: u64) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn encode_net(out: &mut Vec<u8>, net: &QNet) {
    put_u64(out, net.adam_steps);
    out.extend_from_slice(&net.bn_momentum.to_le_bytes());
    let state = net.export_state();
    put_u64(out, state.len() as u64);
    for v in state {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialises both networks: magic, version, architecture, per-net state, SHA-256 trailer.
pub fn encode_checkpoint(nets: &DualNet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let a = nets.grasp.arch;
    for x in [a.resolution, a.tower_depth, a.downsample, a.tower_width, a.head_channels] {
        put_u32(&mut out, x as u32);
    }
    out.extend_from_slice(&nets.grasp_threshold.to_le_bytes());
    encode_net(&mut out, &nets.grasp);
    encode_net(&mut out, &nets.push);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint("checkpoint is truncated".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn decode_net(r: &mut Reader, arch: Architecture) -> Result<QNet> {
    let steps = r.u64()?;
    let momentum = r.f64()?;
    let len = r.u64()? as usize;
    let mut net = QNet::with_seed(arch, momentum, 0)?;
    if len != net.state_len() {
        return Err(Error::Checkpoint(format!("state length {len} does not match architecture ({})", net.state_len())));
    }
    let bytes = r.take(len * 8)?;
    let state: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    net.import_state(&state)?;
    net.adam_steps = steps;
    Ok(net)
}

/// Inverse of [`encode_checkpoint`]. Any inconsistency is an error; nothing
/// partial is returned.
pub fn decode_checkpoint(data: &[u8]) -> Result<DualNet> {
    if data.len() < MAGIC.len() + 4 || &data[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(data[MAGIC.len()..MAGIC.len() + 4].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if data.len() < 32 {
        return Err(Error::Checkpoint("checkpoint is truncated".into()));
    }
    let (body, digest) = data.split_at(data.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch (truncated or corrupted file)".into()));
    }
    let mut r = Reader {
        data: body,
        pos: MAGIC.len() + 4,
    };
    let mut dims = [0usize; 5];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let arch = Architecture {
        resolution: dims[0],
        tower_depth: dims[1],
        downsample: dims[2],
        tower_width: dims[3],
        head_channels: dims[4],
    };
    let grasp_threshold = r.f64()?;
    let grasp = decode_net(&mut r, arch)?;
    let push = decode_net(&mut r, arch)?;
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after network state".into()));
    }
    Ok(DualNet {
        grasp,
        push,
        grasp_threshold,
    })
}

/// Writes the blob and its sidecar. The blob is written to a temporary file
/// and renamed so a crash never leaves a half-written checkpoint.
pub fn save_checkpoint(path: &Path, nets: &DualNet, meta: &CheckpointMeta) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode_checkpoint(nets))?;
    std::fs::rename(&tmp, path)?;
    // The sidecar lands last, so its presence marks a complete checkpoint.
    let meta_file = meta_path(path);
    let meta_tmp = meta_file.with_extension("meta.tmp");
    std::fs::write(&meta_tmp, meta.to_text())?;
    std::fs::rename(&meta_tmp, &meta_file)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(DualNet, CheckpointMeta)> {
    let meta = CheckpointMeta::from_text(&std::fs::read_to_string(meta_path(path))?)?;
    let nets = decode_checkpoint(&std::fs::read(path)?)?;
    Ok((nets, meta))
}
