//! Deterministic top-down quasi-static tabletop.
//!
//! Objects are flat prisms (square, rectangle, disc) on the unit-square
//! workspace. Pushes translate objects without rotation; overlaps are resolved
//! by sequential projection in ascending id order. A grasp is a parallel-jaw
//! feasibility test on footprints and removes the grasped object.

use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::SimConfig;
use crate::error::{Error, Result};
use crate::geometry::{intersection_area, overlap_depth, penetration, separation_along, ConvexPolygon, Footprint, Vec2};
use crate::grid::Grid;
use crate::perception::{self, ROTATIONS};
use crate::rng::{derive_seed, seeded};

pub const SCENE_FILE_VERSION: u32 = 1;

/// Palette index reserved for the goal object.
pub const GOAL_COLOR_ID: u8 = 0;

/// RGB palette; entry 0 (green) is never given to a non-goal object.
pub const PALETTE: [[u8; 3]; 8] = [
    [40, 200, 60],
    [220, 50, 50],
    [50, 90, 220],
    [230, 200, 40],
    [240, 130, 30],
    [150, 60, 190],
    [40, 190, 200],
    [160, 160, 160],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Rectangle,
    Disc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectBody {
    pub id: u32,
    pub shape: Shape,
    /// `[hx, hy]`; a disc stores its radius in both entries.
    pub half_extents: [f64; 2],
    pub height: f64,
    pub pose: Pose,
    pub color_id: u8,
    pub is_goal: bool,
}

impl ObjectBody {
    pub fn footprint(&self) -> Footprint {
        match self.shape {
            Shape::Disc => Footprint::Disc {
                center: self.pose.position(),
                radius: self.half_extents[0],
            },
            Shape::Square | Shape::Rectangle => Footprint::Polygon(ConvexPolygon::rectangle(
                self.pose.position(),
                self.half_extents[0],
                self.half_extents[1],
                self.pose.theta,
            )),
        }
    }

    /// Largest distance from the centre to any point of the footprint.
    pub fn bounding_radius(&self) -> f64 {
        match self.shape {
            Shape::Disc => self.half_extents[0],
            _ => self.half_extents[0].hypot(self.half_extents[1]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Default for Workspace {
    fn default() -> Self {
        Self {
            min: [0.0, 0.0],
            max: [1.0, 1.0],
        }
    }
}

impl Workspace {
    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.min[0] && p.x <= self.max[0] && p.y >= self.min[1] && p.y <= self.max[1]
    }

    pub fn center(&self) -> Vec2 {
        Vec2::new(0.5 * (self.min[0] + self.max[0]), 0.5 * (self.min[1] + self.max[1]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Sorted by ascending id.
    pub objects: Vec<ObjectBody>,
    pub workspace: Workspace,
    pub rng_seed: u64,
    /// Set by the packed generator: `Some(true)` when the goal was verified ungraspable.
    pub certificate: Option<bool>,
}

impl Scene {
    pub fn new(objects: Vec<ObjectBody>, rng_seed: u64) -> Self {
        Self {
            objects,
            workspace: Workspace::default(),
            rng_seed,
            certificate: None,
        }
    }

    pub fn goal(&self) -> Option<&ObjectBody> {
        self.objects.iter().find(|o| o.is_goal)
    }

    pub fn goal_id(&self) -> Option<u32> {
        self.goal().map(|o| o.id)
    }

    pub fn object(&self, id: u32) -> Option<&ObjectBody> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Largest pairwise penetration depth between footprints.
    pub fn max_overlap(&self) -> f64 {
        let fps: Vec<Footprint> = self.objects.iter().map(ObjectBody::footprint).collect();
        let mut worst: f64 = 0.0;
        for i in 0..fps.len() {
            for j in i + 1..fps.len() {
                worst = worst.max(overlap_depth(&fps[i], &fps[j]));
            }
        }
        worst
    }

    pub fn to_json(&self) -> Result<String> {
        let file = SceneFile {
            version: SCENE_FILE_VERSION,
            seed: self.rng_seed,
            workspace: self.workspace,
            objects: self.objects.clone(),
            certificate: self.certificate,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SceneFile = serde_json::from_str(text)?;
        if file.version != SCENE_FILE_VERSION {
            return Err(Error::Version {
                found: file.version,
                expected: SCENE_FILE_VERSION,
            });
        }
        Ok(Self {
            objects: file.objects,
            workspace: file.workspace,
            rng_seed: file.seed,
            certificate: file.certificate,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    version: u32,
    seed: u64,
    workspace: Workspace,
    objects: Vec<ObjectBody>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    certificate: Option<bool>,
}

/// Unit direction of rotation index `k` (`k * 22.5°`).
pub fn direction(k: usize) -> Vec2 {
    Vec2::from_angle(perception::rotation_angle(k))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PushCommand {
    pub start: Vec2,
    pub direction_index: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraspCommand {
    pub center: Vec2,
    pub rotation_index: usize,
    pub jaw_open_width: f64,
    pub finger_thickness: f64,
    pub finger_length: f64,
}

impl GraspCommand {
    pub fn with_config(center: Vec2, rotation_index: usize, cfg: &SimConfig) -> Self {
        Self {
            center,
            rotation_index,
            jaw_open_width: cfg.jaw_open_width,
            finger_thickness: cfg.finger_thickness,
            finger_length: cfg.finger_length,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraspFailure {
    OutOfBounds,
    /// Nothing between the fingers.
    Empty,
    /// A finger lands on an object.
    Collision,
    /// The object is wider than the jaw opening along the closing axis.
    TooWide,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraspResult {
    Success { object_id: u32 },
    Failure { reason: GraspFailure },
}

impl GraspResult {
    pub fn grasped(&self) -> Option<u32> {
        match self {
            GraspResult::Success { object_id } => Some(*object_id),
            GraspResult::Failure { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub u0: usize,
    pub v0: usize,
    /// Exclusive.
    pub u1: usize,
    /// Exclusive.
    pub v1: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneChangeReport {
    pub changed: bool,
    pub changed_pixel_count: usize,
    pub window: PixelRect,
}

impl SceneChangeReport {
    pub fn unchanged() -> Self {
        Self {
            changed: false,
            changed_pixel_count: 0,
            window: PixelRect { u0: 0, v0: 0, u1: 0, v1: 0 },
        }
    }
}

fn check_objects(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("scene needs at least one object".into()));
    }
    Ok(())
}

fn random_color(rng: &mut impl Rng) -> u8 {
    rng.gen_range(1..PALETTE.len() as u8)
}

fn random_object(id: u32, rng: &mut impl Rng, cfg: &SimConfig) -> ObjectBody {
    let shape = [Shape::Square, Shape::Rectangle, Shape::Disc][rng.gen_range(0..3)];
    let half_extents = match shape {
        Shape::Square => [cfg.square_half; 2],
        Shape::Rectangle => [cfg.rect_half_long, cfg.rect_half_short],
        Shape::Disc => [cfg.disc_radius; 2],
    };
    ObjectBody {
        id,
        shape,
        half_extents,
        height: rng.gen_range(cfg.height_min..=cfg.height_max),
        pose: Pose {
            x: 0.5,
            y: 0.5,
            theta: if shape == Shape::Disc { 0.0 } else { rng.gen_range(0.0..TAU) },
        },
        color_id: random_color(rng),
        is_goal: false,
    }
}

fn mark_goal(objects: &mut [ObjectBody], goal_index: usize) {
    for (i, o) in objects.iter_mut().enumerate() {
        o.is_goal = i == goal_index;
        if o.is_goal {
            o.color_id = GOAL_COLOR_ID;
        }
    }
}

fn overlaps_any(candidate: &Footprint, placed: &[ObjectBody], clearance: f64) -> bool {
    placed.iter().any(|o| {
        let fp = o.footprint();
        if clearance > 0.0 {
            let c = candidate.center().distance(fp.center());
            if c > o.bounding_radius() + 2.0 * clearance + 0.2 {
                return false;
            }
            inflate(&fp, clearance).map_or(false, |f| overlap_depth(candidate, &f) > 0.0)
        } else {
            overlap_depth(candidate, &fp) > 0.0
        }
    })
}

fn inflate(fp: &Footprint, by: f64) -> Option<Footprint> {
    match fp {
        Footprint::Disc { center, radius } => Some(Footprint::Disc {
            center: *center,
            radius: radius + by,
        }),
        Footprint::Polygon(p) => {
            let c = p.centroid();
            Some(Footprint::Polygon(ConvexPolygon::new(
                p.vertices
                    .iter()
                    .map(|&v| {
                        let d = v - c;
                        c + d * ((d.norm() + by * std::f64::consts::SQRT_2) / d.norm())
                    })
                    .collect(),
            )))
        }
    }
}

/// Structured scene: blocks on a jittered tight grid with the goal in an
/// interior cell. For five or more objects the goal is certified ungraspable
/// by an exhaustive sweep over every pixel action; attempts are re-drawn from
/// derived seeds until the certificate holds (at most 100 attempts).
pub fn spawn_packed_scene(n_objects: usize, seed: u64, cfg: &SimConfig) -> Result<Scene> {
    if n_objects < 2 {
        return Err(Error::Config("packed scenes need at least two objects".into()));
    }
    for attempt in 0..100u64 {
        let mut scene = packed_layout(n_objects, derive_seed(seed, &[attempt]), cfg);
        scene.rng_seed = seed;
        if n_objects < 5 {
            // Fewer than five blocks cannot enclose the goal on both axes.
            let feasible = feasible_goal_grasps(&scene, cfg, cfg.resolution, 1);
            scene.certificate = Some(feasible.is_empty());
            return Ok(scene);
        }
        if feasible_goal_grasps(&scene, cfg, cfg.resolution, 1).is_empty() {
            scene.certificate = Some(true);
            return Ok(scene);
        }
    }
    Err(Error::Config(format!(
        "could not generate a certified packed scene with {n_objects} objects in 100 attempts; object size, gap and gripper geometry are inconsistent"
    )))
}

fn packed_layout(n: usize, seed: u64, cfg: &SimConfig) -> Scene {
    let mut rng = seeded(seed);
    let side = 2.0 * cfg.square_half;
    let gap = rng.gen_range(cfg.packed_gap_min..=cfg.packed_gap_max);
    // Worst-case extent of a jittered block plus the sampled gap.
    let pitch = side * (cfg.packed_angle_jitter.cos() + cfg.packed_angle_jitter.sin()) + 2.0 * cfg.packed_position_jitter + gap;

    let s = (n as f64).sqrt().round() as i64;
    let (cells, goal_cell, offset) = if s >= 3 && (s * s) as usize == n {
        let cells: Vec<(i64, i64)> = (0..s).flat_map(|r| (0..s).map(move |c| (c, r))).collect();
        let goal = (rng.gen_range(1..s - 1), rng.gen_range(1..s - 1));
        (cells, goal, (s as f64 - 1.0) / 2.0)
    } else {
        // Fill cells outward from the goal: nearest ring first, edge
        // neighbours before corners, random order within a tier.
        let ring = ((n as f64).sqrt().ceil() as i64 + 1) / 2 + 1;
        let mut cand: Vec<(i64, i64, u32)> = Vec::new();
        for r in -ring..=ring {
            for c in -ring..=ring {
                cand.push((c, r, rng.gen()));
            }
        }
        cand.sort_by_key(|&(c, r, t)| (c.abs().max(r.abs()), c.abs() + r.abs(), t));
        (cand.into_iter().take(n).map(|(c, r, _)| (c, r)).collect(), (0, 0), 0.0)
    };

    let center = Vec2::new(0.5, 0.5);
    let pj = cfg.packed_position_jitter;
    let aj = cfg.packed_angle_jitter;
    let mut objects: Vec<ObjectBody> = cells
        .iter()
        .enumerate()
        .map(|(i, &(c, r))| {
            let jitter = Vec2::new(rng.gen_range(-pj..=pj), rng.gen_range(-pj..=pj));
            let p = center + Vec2::new(c as f64 - offset, r as f64 - offset) * pitch + jitter;
            ObjectBody {
                id: i as u32,
                shape: Shape::Square,
                half_extents: [cfg.square_half; 2],
                height: rng.gen_range(cfg.height_min..=cfg.height_max),
                pose: Pose {
                    x: p.x,
                    y: p.y,
                    theta: rng.gen_range(-aj..=aj),
                },
                color_id: random_color(&mut rng),
                is_goal: false,
            }
        })
        .collect();
    let goal_index = cells.iter().position(|&c| c == goal_cell).expect("goal cell is part of the layout");
    mark_goal(&mut objects, goal_index);
    Scene::new(objects, seed)
}

/// Unstructured scene: objects dropped one at a time at the workspace centre
/// plus seeded noise; each drop slides radially outwards in fixed steps until
/// it no longer overlaps previously placed objects.
pub fn spawn_pile_scene(n_objects: usize, seed: u64, cfg: &SimConfig) -> Result<Scene> {
    check_objects(n_objects)?;
    let mut rng = seeded(seed);
    let goal_index = rng.gen_range(0..n_objects);
    let center = Vec2::new(0.5, 0.5);
    let mut placed: Vec<ObjectBody> = Vec::with_capacity(n_objects);
    for i in 0..n_objects {
        let mut obj = random_object(i as u32, &mut rng, cfg);
        let noise = Vec2::new(rng.gen_range(-cfg.pile_noise..=cfg.pile_noise), rng.gen_range(-cfg.pile_noise..=cfg.pile_noise));
        let mut pos = center + noise;
        let mut dir = noise.normalized();
        if noise.norm() == 0.0 {
            dir = Vec2::from_angle(rng.gen_range(0.0..TAU));
        }
        obj.pose.x = pos.x;
        obj.pose.y = pos.y;
        while overlaps_any(&obj.footprint(), &placed, 0.0) {
            pos = pos + dir * cfg.pile_settle_step;
            obj.pose.x = pos.x;
            obj.pose.y = pos.y;
        }
        placed.push(obj);
    }
    mark_goal(&mut placed, goal_index);
    Ok(Scene::new(placed, seed))
}

/// Sparse scene: objects scattered uniformly over the central region with a
/// clearance between them (rejection sampling).
pub fn spawn_sparse_scene(n_objects: usize, seed: u64, cfg: &SimConfig) -> Result<Scene> {
    check_objects(n_objects)?;
    let mut rng = seeded(seed);
    let goal_index = rng.gen_range(0..n_objects);
    let mut placed: Vec<ObjectBody> = Vec::with_capacity(n_objects);
    for i in 0..n_objects {
        let mut obj = random_object(i as u32, &mut rng, cfg);
        let mut ok = false;
        for _ in 0..10_000 {
            obj.pose.x = rng.gen_range(cfg.sparse_region_min..=cfg.sparse_region_max);
            obj.pose.y = rng.gen_range(cfg.sparse_region_min..=cfg.sparse_region_max);
            if !overlaps_any(&obj.footprint(), &placed, cfg.sparse_clearance) {
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::Config(format!("cannot place {n_objects} objects sparsely in the configured region")));
        }
        placed.push(obj);
    }
    mark_goal(&mut placed, goal_index);
    Ok(Scene::new(placed, seed))
}

pub fn spawn_scene(scenario: crate::config::Scenario, n_objects: usize, seed: u64, cfg: &SimConfig) -> Result<Scene> {
    use crate::config::Scenario;
    match scenario {
        Scenario::Packed => spawn_packed_scene(n_objects, seed, cfg),
        Scenario::Pile => spawn_pile_scene(n_objects, seed, cfg),
        Scenario::Sparse => spawn_sparse_scene(n_objects, seed, cfg),
    }
}

fn clamp_to_workspace(o: &mut ObjectBody, ws: &Workspace, margin: f64) {
    o.pose.x = o.pose.x.clamp(ws.min[0] + margin, ws.max[0] - margin);
    o.pose.y = o.pose.y.clamp(ws.min[1] + margin, ws.max[1] - margin);
}

fn translate(o: &mut ObjectBody, d: Vec2) {
    o.pose.x += d.x;
    o.pose.y += d.y;
}

/// Sequential projection of overlapping pairs in ascending id order until no
/// pair penetrates beyond tolerance or the iteration cap is hit. The object
/// further along `push_dir` is the one displaced (ties: higher id); when it
/// is pinned by the workspace clamp the other object yields instead.
fn resolve_overlaps(objects: &mut [ObjectBody], push_dir: Vec2, cfg: &SimConfig, ws: &Workspace) {
    let n = objects.len();
    for _ in 0..cfg.max_resolve_iterations {
        let mut moved = false;
        for i in 0..n {
            for j in i + 1..n {
                let (fi, fj) = (objects[i].footprint(), objects[j].footprint());
                let Some((normal, depth)) = penetration(&fi, &fj) else { continue };
                if depth <= cfg.contact_tolerance {
                    continue;
                }
                let pi = objects[i].pose.position().dot(push_dir);
                let pj = objects[j].pose.position().dot(push_dir);
                // `normal` points from i to j.
                let (mover, other, away) = if pi > pj { (i, j, -normal) } else { (j, i, normal) };
                let before = objects[mover].pose;
                translate(&mut objects[mover], away * depth);
                clamp_to_workspace(&mut objects[mover], ws, cfg.workspace_margin);
                let rest = overlap_depth(&objects[mover].footprint(), &objects[other].footprint());
                if rest > cfg.contact_tolerance {
                    translate(&mut objects[other], -away * rest);
                    clamp_to_workspace(&mut objects[other], ws, cfg.workspace_margin);
                }
                moved |= objects[mover].pose != before || rest > cfg.contact_tolerance;
            }
        }
        if !moved {
            break;
        }
    }
}

/// Goal centroid in pixel coordinates at `resolution`.
pub fn goal_centroid_px(scene: &Scene, resolution: usize) -> Option<(i64, i64)> {
    scene.goal().map(|g| {
        (
            (g.pose.x * resolution as f64).floor() as i64,
            (g.pose.y * resolution as f64).floor() as i64,
        )
    })
}

/// Sweeps a disc pusher from `cmd.start` along the command direction.
/// Contacted objects translate along the push direction just enough to clear
/// the pusher; resulting overlaps are resolved sequentially.
pub fn step_push(scene: &Scene, cmd: &PushCommand, cfg: &SimConfig) -> (Scene, SceneChangeReport) {
    if !scene.workspace.contains(cmd.start) || cmd.direction_index >= ROTATIONS || !(cmd.distance >= 0.0) {
        return (scene.clone(), SceneChangeReport::unchanged());
    }
    let res = cfg.resolution;
    let depth_before = perception::render_depth(scene, res, cfg.max_height);
    let goal_px = goal_centroid_px(scene, res);

    let mut next = scene.clone();
    next.certificate = None;
    let dir = direction(cmd.direction_index);
    let substeps = ((cmd.distance / cfg.push_substep).ceil() as usize).max(1);
    for s in 0..=substeps {
        let pusher = Footprint::Disc {
            center: cmd.start + dir * (cmd.distance * s as f64 / substeps as f64),
            radius: cfg.pusher_radius,
        };
        let mut contact = false;
        for o in next.objects.iter_mut() {
            let fp = o.footprint();
            if overlap_depth(&fp, &pusher) > 0.0 {
                let t = separation_along(&fp, &pusher, dir, 0.0);
                translate(o, dir * t);
                clamp_to_workspace(o, &scene.workspace, cfg.workspace_margin);
                contact = true;
            }
        }
        if contact {
            resolve_overlaps(&mut next.objects, dir, cfg, &scene.workspace);
        }
    }
    let report = match goal_px {
        Some(px) => {
            let depth_after = perception::render_depth(&next, res, cfg.max_height);
            scene_change(&depth_before, &depth_after, px, cfg)
        }
        None => SceneChangeReport::unchanged(),
    };
    (next, report)
}

/// Counts pixels in a `window`-sized square around the goal centroid whose
/// depth changed by more than the depth threshold.
pub fn scene_change(before: &Grid<f32>, after: &Grid<f32>, goal_px: (i64, i64), cfg: &SimConfig) -> SceneChangeReport {
    assert_eq!(before.size, after.size, "depth grids must share a shape");
    let size = before.size as i64;
    let half = (cfg.change_window / 2) as i64;
    let clip = |x: i64| x.clamp(0, size) as usize;
    let window = PixelRect {
        u0: clip(goal_px.0 - half),
        v0: clip(goal_px.1 - half),
        u1: clip(goal_px.0 - half + cfg.change_window as i64),
        v1: clip(goal_px.1 - half + cfg.change_window as i64),
    };
    let mut count = 0;
    for v in window.v0..window.v1 {
        for u in window.u0..window.u1 {
            if ((after.get(u, v) - before.get(u, v)) as f64).abs() > cfg.change_depth_threshold {
                count += 1;
            }
        }
    }
    SceneChangeReport {
        changed: count >= cfg.change_count_threshold,
        changed_pixel_count: count,
        window,
    }
}

/// Precomputed footprints for repeated grasp-feasibility queries on one scene.
pub struct GraspOracle<'a> {
    scene: &'a Scene,
    footprints: Vec<Footprint>,
    radii: Vec<f64>,
}

impl<'a> GraspOracle<'a> {
    pub fn new(scene: &'a Scene) -> Self {
        Self {
            footprints: scene.objects.iter().map(ObjectBody::footprint).collect(),
            radii: scene.objects.iter().map(ObjectBody::bounding_radius).collect(),
            scene,
        }
    }

    /// Feasibility of a parallel-jaw grasp. Success requires an object inside
    /// the closing region, both finger pads free of every footprint and the
    /// selected object (largest closing-region overlap, ties to the lowest id)
    /// no wider than the jaw opening along the closing axis.
    pub fn evaluate(&self, cmd: &GraspCommand) -> GraspResult {
        if !self.scene.workspace.contains(cmd.center) || cmd.rotation_index >= ROTATIONS {
            return GraspResult::Failure {
                reason: GraspFailure::OutOfBounds,
            };
        }
        let angle = perception::rotation_angle(cmd.rotation_index);
        let axis = Vec2::from_angle(angle);
        let half_w = 0.5 * cmd.jaw_open_width;
        let half_l = 0.5 * cmd.finger_length;
        let reach = half_w + cmd.finger_thickness + half_l;
        let closing = ConvexPolygon::rectangle(cmd.center, half_w, half_l, angle);

        let mut best: Option<(usize, f64)> = None;
        let mut near: Vec<usize> = Vec::new();
        for (i, fp) in self.footprints.iter().enumerate() {
            if fp.center().distance(cmd.center) > reach + self.radii[i] {
                continue;
            }
            near.push(i);
            let area = intersection_area(&closing, fp);
            if area > 0.0 && best.map_or(true, |(_, a)| area > a) {
                best = Some((i, area));
            }
        }
        let Some((target, _)) = best else {
            return GraspResult::Failure {
                reason: GraspFailure::Empty,
            };
        };
        let off = half_w + 0.5 * cmd.finger_thickness;
        for side in [-1.0, 1.0] {
            let finger = Footprint::Polygon(ConvexPolygon::rectangle(
                cmd.center + axis * (side * off),
                0.5 * cmd.finger_thickness,
                half_l,
                angle,
            ));
            if near.iter().any(|&i| overlap_depth(&finger, &self.footprints[i]) > 0.0) {
                return GraspResult::Failure {
                    reason: GraspFailure::Collision,
                };
            }
        }
        let (lo, hi) = self.footprints[target].project(axis);
        if hi - lo > cmd.jaw_open_width {
            return GraspResult::Failure {
                reason: GraspFailure::TooWide,
            };
        }
        GraspResult::Success {
            object_id: self.scene.objects[target].id,
        }
    }
}

/// Executes a grasp; on success the grasped object leaves the scene.
pub fn step_grasp(scene: &Scene, cmd: &GraspCommand) -> (Scene, GraspResult) {
    let result = GraspOracle::new(scene).evaluate(cmd);
    let mut next = scene.clone();
    if let GraspResult::Success { object_id } = result {
        next.objects.retain(|o| o.id != object_id);
        next.certificate = None;
    }
    (next, result)
}

/// Every pixel action `(k, u, v)` at `resolution` whose grasp lifts the goal,
/// stopping after `limit` hits (`usize::MAX` for a full sweep).
pub fn feasible_goal_grasps(scene: &Scene, cfg: &SimConfig, resolution: usize, limit: usize) -> Vec<(usize, usize, usize)> {
    let Some(goal) = scene.goal() else { return Vec::new() };
    let oracle = GraspOracle::new(scene);
    let reach = 0.5 * cfg.jaw_open_width + 0.5 * cfg.finger_length + goal.bounding_radius();
    let gp = goal.pose.position();
    let mut hits = Vec::new();
    for k in 0..ROTATIONS {
        for u in 0..resolution {
            for v in 0..resolution {
                let Ok(pose) = perception::decode_pixel(k, u, v, resolution) else { continue };
                if pose.position().distance(gp) > reach {
                    continue;
                }
                let cmd = GraspCommand::with_config(pose.position(), k, cfg);
                if oracle.evaluate(&cmd).grasped() == Some(goal.id) {
                    hits.push((k, u, v));
                    if hits.len() >= limit {
                        return hits;
                    }
                }
            }
        }
    }
    hits
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SimConfig {
        SimConfig::default()
    }

    fn single(shape: Shape, x: f64, y: f64, theta: f64) -> Scene {
        let c = cfg();
        let half = match shape {
            Shape::Square => [c.square_half; 2],
            Shape::Rectangle => [c.rect_half_long, c.rect_half_short],
            Shape::Disc => [c.disc_radius; 2],
        };
        Scene::new(
            vec![ObjectBody {
                id: 0,
                shape,
                half_extents: half,
                height: 0.05,
                pose: Pose { x, y, theta },
                color_id: GOAL_COLOR_ID,
                is_goal: true,
            }],
            0,
        )
    }

    #[test]
    fn packed_small_counts_stay_in_bounds() {
        for seed in 0..5 {
            let s = spawn_packed_scene(2, seed, &cfg()).unwrap();
            assert_eq!(s.objects.len(), 2);
            for o in &s.objects {
                assert!(s.workspace.contains(o.pose.position()));
            }
        }
    }

    #[test]
    fn packed_is_overlap_free_with_one_goal() {
        for n in [5, 9, 16] {
            let s = spawn_packed_scene(n, 3, &cfg()).unwrap();
            assert_eq!(s.objects.len(), n);
            assert_eq!(s.objects.iter().filter(|o| o.is_goal).count(), 1);
            assert!(s.max_overlap() <= 1e-6, "n={n} overlap {}", s.max_overlap());
            assert_eq!(s.certificate, Some(true));
        }
    }

    #[test]
    fn sixteen_objects_form_a_four_by_four_grid() {
        let s = spawn_packed_scene(16, 3, &cfg()).unwrap();
        let mut xs: Vec<f64> = s.objects.iter().map(|o| (o.pose.x * 100.0).round()).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup_by(|a, b| (*a - *b).abs() <= 1.0);
        assert_eq!(xs.len(), 4);
    }

    #[test]
    fn goal_color_is_reserved() {
        for seed in 0..20 {
            let s = spawn_pile_scene(10, seed, &cfg()).unwrap();
            for o in &s.objects {
                assert_eq!(o.color_id == GOAL_COLOR_ID, o.is_goal);
            }
        }
    }

    #[test]
    fn single_pile_object_lands_near_center() {
        let c = cfg();
        let s = spawn_pile_scene(1, 42, &c).unwrap();
        assert_eq!(s.objects.len(), 1);
        assert!(s.objects[0].is_goal);
        assert!(s.objects[0].pose.position().distance(Vec2::new(0.5, 0.5)) <= c.pile_noise * 2f64.sqrt());
    }

    #[test]
    fn pile_ten_is_overlap_free() {
        let s = spawn_pile_scene(10, 1, &cfg()).unwrap();
        assert_eq!(s.objects.len(), 10);
        assert!(s.max_overlap() <= 1e-6);
        let ids: Vec<u32> = s.objects.iter().map(|o| o.id).collect();
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn pile_density_grows_with_count() {
        let c = cfg();
        let within = |s: &Scene| s.objects.iter().filter(|o| o.pose.position().distance(Vec2::new(0.5, 0.5)) <= 0.25).count();
        let a = spawn_pile_scene(10, 9, &c).unwrap();
        let b = spawn_pile_scene(20, 9, &c).unwrap();
        assert!(within(&b) > within(&a));
    }

    #[test]
    fn push_through_free_space_changes_nothing() {
        let c = cfg();
        let s = single(Shape::Square, 0.3, 0.3, 0.0);
        let (next, report) = step_push(
            &s,
            &PushCommand {
                start: Vec2::new(0.7, 0.7),
                direction_index: 0,
                distance: c.push_distance,
            },
            &c,
        );
        assert_eq!(next.objects, s.objects);
        assert!(!report.changed);
    }

    #[test]
    fn push_from_boundary_translates_by_distance() {
        let c = cfg();
        for k in [0usize, 3, 4, 9] {
            let s = single(Shape::Disc, 0.5, 0.5, 0.0);
            let d = direction(k);
            // Pusher tangent to the disc, behind it with respect to the push direction.
            let start = Vec2::new(0.5, 0.5) - d * (c.disc_radius + c.pusher_radius);
            let (next, report) = step_push(
                &s,
                &PushCommand {
                    start,
                    direction_index: k,
                    distance: c.push_distance,
                },
                &c,
            );
            let moved = next.objects[0].pose.position() - s.objects[0].pose.position();
            assert!((moved - d * c.push_distance).norm() < 1e-6, "k={k} moved {moved:?}");
            assert!(report.changed);
        }
    }

    #[test]
    fn push_into_row_moves_all_without_overlap() {
        let c = cfg();
        let pitch = 2.0 * c.square_half + 0.004;
        let objects = (0..3)
            .map(|i| ObjectBody {
                id: i,
                shape: Shape::Square,
                half_extents: [c.square_half; 2],
                height: 0.05,
                pose: Pose {
                    x: 0.35 + pitch * i as f64,
                    y: 0.5,
                    theta: 0.0,
                },
                color_id: if i == 1 { GOAL_COLOR_ID } else { 2 },
                is_goal: i == 1,
            })
            .collect();
        let s = Scene::new(objects, 0);
        let start = Vec2::new(0.35 - c.square_half - c.pusher_radius, 0.5);
        let (next, _) = step_push(
            &s,
            &PushCommand {
                start,
                direction_index: 0,
                distance: c.push_distance,
            },
            &c,
        );
        for (a, b) in s.objects.iter().zip(&next.objects) {
            assert!(b.pose.x - a.pose.x > 0.02, "object {} moved {}", a.id, b.pose.x - a.pose.x);
        }
        assert!(next.max_overlap() <= c.contact_tolerance);
    }

    #[test]
    fn push_outside_workspace_is_rejected() {
        let c = cfg();
        let s = single(Shape::Square, 0.5, 0.5, 0.0);
        let (next, report) = step_push(
            &s,
            &PushCommand {
                start: Vec2::new(-0.1, 0.5),
                direction_index: 0,
                distance: c.push_distance,
            },
            &c,
        );
        assert_eq!(next, s);
        assert!(!report.changed);
    }

    #[test]
    fn aligned_grasp_on_isolated_square_succeeds() {
        let c = cfg();
        let s = single(Shape::Square, 0.5, 0.5, 0.0);
        let (next, result) = step_grasp(&s, &GraspCommand::with_config(Vec2::new(0.5, 0.5), 0, &c));
        assert_eq!(result, GraspResult::Success { object_id: 0 });
        assert!(next.objects.is_empty());
    }

    #[test]
    fn grasp_on_empty_space_fails() {
        let c = cfg();
        let s = single(Shape::Square, 0.5, 0.5, 0.0);
        let (next, result) = step_grasp(&s, &GraspCommand::with_config(Vec2::new(0.2, 0.2), 0, &c));
        assert_eq!(result, GraspResult::Failure { reason: GraspFailure::Empty });
        assert_eq!(next, s);
    }

    #[test]
    fn grasp_outside_workspace_fails() {
        let c = cfg();
        let s = single(Shape::Square, 0.5, 0.5, 0.0);
        let (_, result) = step_grasp(&s, &GraspCommand::with_config(Vec2::new(1.2, 0.5), 0, &c));
        assert_eq!(result, GraspResult::Failure { reason: GraspFailure::OutOfBounds });
    }

    #[test]
    fn rectangle_across_its_long_side_is_too_wide() {
        let c = cfg();
        let s = single(Shape::Rectangle, 0.5, 0.5, 0.0);
        // Closing axis along the long side (x).
        let (_, along) = step_grasp(&s, &GraspCommand::with_config(Vec2::new(0.5, 0.5), 0, &c));
        assert!(along.grasped().is_none() || 2.0 * c.rect_half_long <= c.jaw_open_width);
        let (_, across) = step_grasp(&s, &GraspCommand::with_config(Vec2::new(0.5, 0.5), 4, &c));
        assert_eq!(across, GraspResult::Success { object_id: 0 });
    }

    #[test]
    fn packed_goal_has_no_feasible_grasp_seed_7() {
        let c = cfg();
        let s = spawn_packed_scene(5, 7, &c).unwrap();
        assert!(feasible_goal_grasps(&s, &c, c.resolution, usize::MAX).is_empty());
    }

    #[test]
    fn scene_change_identical_and_windowed() {
        let c = cfg();
        let a = Grid::filled(64, 0.0f32);
        let r = scene_change(&a, &a, (32, 32), &c);
        assert!(!r.changed);
        assert_eq!(r.changed_pixel_count, 0);

        // Goal block translated by 3 px inside the window.
        let mut before = Grid::filled(64, 0.0f32);
        let mut after = Grid::filled(64, 0.0f32);
        for v in 28..36 {
            for u in 28..36 {
                before.set(u, v, 0.6);
                after.set(u + 3, v, 0.6);
            }
        }
        assert!(scene_change(&before, &after, (32, 32), &c).changed);

        // Change far outside the window.
        let mut far = Grid::filled(64, 0.0f32);
        for v in 0..6 {
            for u in 0..6 {
                far.set(u, v, 0.9);
            }
        }
        let r = scene_change(&a, &far, (50, 50), &c);
        assert!(!r.changed);
        assert_eq!(r.changed_pixel_count, 0);
    }

    #[test]
    fn scene_window_clips_at_border() {
        let c = cfg();
        let a = Grid::filled(64, 0.0f32);
        let r = scene_change(&a, &a, (0, 63), &c);
        assert_eq!(r.window.u0, 0);
        assert_eq!(r.window.v1, 64);
    }

    #[test]
    fn scene_json_round_trip() {
        let s = spawn_pile_scene(7, 5, &cfg()).unwrap();
        let back = Scene::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn scene_json_version_checked() {
        let s = spawn_pile_scene(2, 5, &cfg()).unwrap();
        let text = s.to_json().unwrap().replace("\"version\": 1", "\"version\": 9");
        assert!(matches!(Scene::from_json(&text), Err(Error::Version { found: 9, .. })));
    }
}
