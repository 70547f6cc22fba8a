//! PNG output: training curves, masked Q-map overlays and episode strips.
//! Everything drawn is recomputed from logs, records or checkpoints.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use plotters::prelude::*;
use plotters::style::FontStyle;
use pushgrasp::config::{RunConfig, Scenario};
use pushgrasp::evaluation::{benchmark_scene_seed, run_episode_with, EpisodeMeta, QAgent};
use pushgrasp::grid::Grid;
use pushgrasp::perception::{build_rotated_stack, encode_pixel, render, ROTATIONS};
use pushgrasp::policy::{load_checkpoint, select_action, Mode, Primitive, QMapStack, Stage};
use pushgrasp::sim::{spawn_scene, Scene};
use pushgrasp::Error;

use crate::commands::{read_records, replay_context};
use crate::rundir::CONFIG_FILE;
use crate::{AgentArg, CliResult, ConfigArgs, PlotKind};

const FONT_PATHS: [&str; 3] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
];

/// Registers a system sans-serif font once; plots skip text without one.
fn have_font() -> bool {
    static FONT: OnceLock<bool> = OnceLock::new();
    *FONT.get_or_init(|| {
        for p in FONT_PATHS {
            if let Ok(bytes) = fs::read(p) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        false
    })
}

fn draw_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

#[allow(clippy::too_many_arguments)]
pub fn plot(
    args: &ConfigArgs,
    run: &Path,
    kind: PlotKind,
    checkpoint: Option<&Path>,
    scene: Option<&Path>,
    records: Option<&Path>,
    index: usize,
    agent: AgentArg,
    out: Option<&Path>,
) -> CliResult<()> {
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| run.join("plots"));
    fs::create_dir_all(&out)?;
    let written = match kind {
        PlotKind::Curves => curves(run, &out)?,
        PlotKind::Heatmap => {
            let base = match fs::read_to_string(run.join(CONFIG_FILE)) {
                Ok(t) => Some(RunConfig::from_text(&t)?),
                Err(_) => None,
            };
            let cfg = args.resolve(base)?;
            let ckpt = match checkpoint {
                Some(c) => c.to_path_buf(),
                None => latest_checkpoint(run)?,
            };
            let scene = match scene {
                Some(p) => Scene::load(p)?,
                None => spawn_scene(Scenario::Packed, 5, benchmark_scene_seed(cfg.eval.base_seed, Scenario::Packed, 5, 0), &cfg.sim)?,
            };
            heatmaps(&cfg, &ckpt, &scene, &out)?
        }
        PlotKind::EpisodeStrip => {
            let records = records.ok_or_else(|| Error::Prerequisite("episode_strip needs --records <file>".into()))?;
            episode_strip(args, records, index, checkpoint, agent, &out)?
        }
    };
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

/// Newest `_final` checkpoint in curriculum order, else the newest episode checkpoint.
fn latest_checkpoint(run: &Path) -> CliResult<PathBuf> {
    let dir = run.join("checkpoints");
    for stage in Stage::ALL.iter().rev() {
        let p = dir.join(format!("{}_final.ckpt", stage.name()));
        if p.exists() {
            return Ok(p);
        }
    }
    let mut newest: Option<(std::time::SystemTime, PathBuf)> = None;
    if let Ok(entries) = fs::read_dir(&dir) {
        for e in entries.flatten() {
            let p = e.path();
            if p.extension().is_some_and(|x| x == "ckpt") {
                let t = e.metadata().and_then(|m| m.modified()).unwrap_or(std::time::UNIX_EPOCH);
                if newest.as_ref().is_none_or(|(nt, _)| t > *nt) {
                    newest = Some((t, p));
                }
            }
        }
    }
    newest
        .map(|n| n.1)
        .ok_or_else(|| Error::Prerequisite(format!("no checkpoint found in {}; pass --checkpoint", dir.display())).into())
}

/// Per-stage success series read from `episodes.jsonl`, plus the fields that
/// were missing.
pub fn success_series(text: &str) -> (Vec<(Stage, Vec<f64>)>, Vec<String>) {
    let mut series: Vec<(Stage, Vec<f64>)> = Vec::new();
    let mut missing = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let Ok(v) = serde_json::from_str::<serde_json::Value>(line) else {
            missing.push(format!("line {}: unparsable", i + 1));
            continue;
        };
        let Some(stage) = v.get("stage").and_then(|s| s.as_str()).and_then(|s| s.parse::<Stage>().ok()) else {
            missing.push(format!("line {}: stage", i + 1));
            continue;
        };
        let value = match v.get("success").and_then(|s| s.as_bool()) {
            Some(b) => b,
            None => match v.get("goal_grasped").and_then(|s| s.as_bool()) {
                Some(b) => {
                    missing.push(format!("line {}: success (used goal_grasped)", i + 1));
                    b
                }
                None => {
                    missing.push(format!("line {}: success", i + 1));
                    continue;
                }
            },
        };
        match series.iter_mut().find(|(s, _)| *s == stage) {
            Some((_, xs)) => xs.push(value as u8 as f64),
            None => series.push((stage, vec![value as u8 as f64])),
        }
    }
    (series, missing)
}

fn curves(run: &Path, out: &Path) -> CliResult<Vec<PathBuf>> {
    let log = run.join("logs").join("episodes.jsonl");
    let text = fs::read_to_string(&log).map_err(|e| Error::Prerequisite(format!("cannot read {}: {e}", log.display())))?;
    let (series, missing) = success_series(&text);
    if !missing.is_empty() {
        eprintln!("warning: partial plot; missing fields: {}", missing.join("; "));
    }
    let mut written = Vec::new();
    for (stage, xs) in series {
        let path = out.join(format!("curves_{}.png", stage.name()));
        draw_curve(&path, stage, &xs).map_err(draw_err)?;
        written.push(path);
    }
    Ok(written)
}

fn draw_curve(path: &Path, stage: Stage, xs: &[f64]) -> Result<(), Box<dyn std::error::Error>> {
    use pushgrasp::evaluation::{smooth, Smoothing};
    let text = have_font();
    let root = BitMapBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE)?;
    let n = xs.len().max(2);
    let mut builder = ChartBuilder::on(&root);
    builder.margin(12);
    if text {
        builder
            .caption(format!("{} grasp success", stage.name()), ("sans-serif", 22))
            .x_label_area_size(36)
            .y_label_area_size(44);
    }
    let mut chart = builder.build_cartesian_2d(0f64..(n - 1) as f64, 0f64..1.05f64)?;
    if text {
        chart.configure_mesh().x_desc("episode").y_desc("success rate").draw()?;
    }
    let raw = smooth(xs, Smoothing::Rolling(7));
    let exp = smooth(xs, Smoothing::Exponential(0.9));
    let roll = smooth(xs, Smoothing::Rolling(50));
    let grey = RGBColor(190, 190, 190);
    let lines = [
        (raw, grey, "rolling mean, 7"),
        (exp, BLUE, "exponential, 0.9"),
        (roll, RED, "rolling mean, 50"),
    ];
    for (ys, color, label) in lines {
        let s = chart.draw_series(LineSeries::new(ys.into_iter().enumerate().map(|(i, y)| (i as f64, y)), color.stroke_width(2)))?;
        if text {
            s.label(label).legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
        }
    }
    if text {
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
    }
    root.present()?;
    Ok(())
}

fn colormap(t: f64) -> [u8; 3] {
    // Blue to yellow through red.
    let t = t.clamp(0.0, 1.0);
    let r = (255.0 * (1.5 * t).min(1.0)) as u8;
    let g = (255.0 * (2.0 * t - 1.0).max(0.0)) as u8;
    let b = (255.0 * (1.0 - 2.0 * t).max(0.0)) as u8;
    [r, g, b]
}

/// Colour image with Q values blended in on masked pixels only. Returns the
/// pixels (row-major, `[v][u]`) and which of them were overlaid.
pub fn overlay(color: &[Grid<f32>; 3], q: &Grid<f64>, mask: &Grid<bool>) -> (Vec<[u8; 3]>, Vec<bool>) {
    let r = q.size;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for u in 0..r {
        for v in 0..r {
            if mask.get(u, v) {
                lo = lo.min(q.get(u, v));
                hi = hi.max(q.get(u, v));
            }
        }
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut px = Vec::with_capacity(r * r);
    let mut on = Vec::with_capacity(r * r);
    for v in 0..r {
        for u in 0..r {
            let base = [0, 1, 2].map(|c| (color[c].get(u, v).clamp(0.0, 1.0) * 255.0) as f64);
            if mask.get(u, v) {
                let c = colormap((q.get(u, v) - lo) / span);
                px.push([0, 1, 2].map(|i| (0.35 * base[i] + 0.65 * c[i] as f64) as u8));
                on.push(true);
            } else {
                px.push(base.map(|x| (0.5 * x) as u8));
                on.push(false);
            }
        }
    }
    (px, on)
}

fn write_image(path: &Path, px: &[[u8; 3]], size: usize, scale: usize) -> Result<(), Box<dyn std::error::Error>> {
    let side = (size * scale) as u32;
    let root = BitMapBackend::new(path, (side, side)).into_drawing_area();
    for v in 0..size {
        for u in 0..size {
            let [r, g, b] = px[v * size + u];
            let (x, y) = ((u * scale) as i32, (v * scale) as i32);
            root.draw(&Rectangle::new([(x, y), (x + scale as i32, y + scale as i32)], RGBColor(r, g, b).filled()))?;
        }
    }
    root.present()?;
    Ok(())
}

fn best_view(q: &QMapStack, masks: impl Fn(usize) -> Grid<bool>) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for k in 0..ROTATIONS {
        let m = masks(k);
        let view = q.view(k);
        for u in 0..q.resolution {
            for v in 0..q.resolution {
                if m.get(u, v) && view.get(u, v) > best.0 {
                    best = (view.get(u, v), k);
                }
            }
        }
    }
    best.1
}

fn heatmaps(cfg: &RunConfig, ckpt: &Path, scene: &Scene, out: &Path) -> CliResult<Vec<PathBuf>> {
    let (nets, _) = load_checkpoint(ckpt)?;
    let agent = QAgent::new(nets);
    let obs = render(scene, cfg.perception.resolution, cfg.sim.max_height);
    let stack = build_rotated_stack(&obs);
    let (gq, pq) = agent.q_maps(&stack)?;
    let mut rng = pushgrasp::rng::seeded(0);
    let chosen = select_action(&gq, &pq, &stack, Mode::Test, agent.nets.grasp_threshold, 0.0, &mut rng);
    let mut written = Vec::new();
    for (prim, q) in [(Primitive::Grasp, &gq), (Primitive::Push, &pq)] {
        let mask_of = |k: usize| match prim {
            Primitive::Grasp => stack.views[k].goal_mask.clone(),
            Primitive::Push => stack.views[k].all_mask.clone(),
        };
        let k = match chosen {
            Some(a) if a.primitive == prim => a.k,
            _ => best_view(q, mask_of),
        };
        let (px, _) = overlay(&stack.views[k].color, &q.view(k), &mask_of(k));
        let path = out.join(format!("heatmap_{prim}_k{k:02}.png"));
        write_image(&path, &px, stack.resolution(), 6).map_err(draw_err)?;
        written.push(path);
    }
    Ok(written)
}

fn episode_strip(args: &ConfigArgs, records: &Path, index: usize, checkpoint: Option<&Path>, agent: AgentArg, out: &Path) -> CliResult<Vec<PathBuf>> {
    let all = read_records(records)?;
    let rec = all
        .get(index)
        .ok_or_else(|| Error::Config(format!("index {index} out of range: {} holds {} records", records.display(), all.len())))?;
    let (cfg, agent) = replay_context(args, records, checkpoint, agent)?;
    let scene = spawn_scene(rec.scenario, rec.n_objects, rec.seed, &cfg.sim)?;
    let mut frames: Vec<(Scene, Option<pushgrasp::policy::ActionSpec>)> = Vec::new();
    run_episode_with(
        scene,
        agent.as_ref(),
        &cfg,
        EpisodeMeta {
            scenario: rec.scenario,
            n_objects: rec.n_objects,
            seed: rec.seed,
        },
        &mut |s, a| frames.push((s.clone(), a.copied())),
    );
    let res = cfg.perception.resolution;
    let scale = 3;
    let tile = res * scale;
    let gap = 8;
    let header = if have_font() { 22 } else { 0 };
    let width = frames.len() * (tile + gap) + gap;
    let path = out.join(format!("episode_strip_{index:03}.png"));
    let draw = || -> Result<(), Box<dyn std::error::Error>> {
        let root = BitMapBackend::new(&path, (width as u32, (tile + 2 * gap + header) as u32)).into_drawing_area();
        root.fill(&WHITE)?;
        for (i, (scene, action)) in frames.iter().enumerate() {
            let obs = render(scene, res, cfg.sim.max_height);
            let x0 = (gap + i * (tile + gap)) as i32;
            let y0 = (gap + header) as i32;
            for v in 0..res {
                for u in 0..res {
                    let c = [0, 1, 2].map(|ch| (obs.color[ch].get(u, v).clamp(0.0, 1.0) * 255.0) as u8);
                    let (x, y) = (x0 + (u * scale) as i32, y0 + (v * scale) as i32);
                    root.draw(&Rectangle::new([(x, y), (x + scale as i32, y + scale as i32)], RGBColor(c[0], c[1], c[2]).filled()))?;
                }
            }
            let label = match action {
                Some(a) => {
                    if let Some((u, v)) = encode_pixel(0, a.pose.position(), res) {
                        let (x, y) = (x0 + (u * scale) as i32, y0 + (v * scale) as i32);
                        let mark = if a.primitive == Primitive::Grasp { RED } else { BLUE };
                        root.draw(&Circle::new((x, y), 4, mark.stroke_width(2)))?;
                    }
                    format!("{} {}", i, a.primitive)
                }
                None => format!("{i} end"),
            };
            if header > 0 {
                root.draw(&Text::new(label, (x0, 4), ("sans-serif", 16)))?;
            }
        }
        root.present()?;
        Ok(())
    };
    draw().map_err(draw_err)?;
    Ok(vec![path])
}
