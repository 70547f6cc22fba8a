//! Orthographic top-down rendering and rotated observation stacks.
//!
//! Pixel `(u, v)` covers the world square `[u/H, (u+1)/H) x [v/H, (v+1)/H)`:
//! `u` follows world x and `v` follows world y, so image rows run along +y.
//! Rotated views are resampled about the image centre; a pixel of rotated
//! view `k` decodes to the world point obtained by rotating it by `+k * 22.5°`
//! about the centre, and the action direction of that view is the world
//! angle `k * 22.5°`.

use std::f64::consts::PI;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::grid::Grid;
use crate::sim::{Pose, Scene, GOAL_COLOR_ID, PALETTE};

/// Number of discrete action orientations.
pub const ROTATIONS: usize = 16;

/// World angle (radians) of rotation index `k`.
pub fn rotation_angle(k: usize) -> f64 {
    k as f64 * PI / 8.0
}

/// Rendered scene. Colour and depth are in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub color: [Grid<f32>; 3],
    /// Object height over `max_height`, 0 for the empty table.
    pub depth: Grid<f32>,
    /// Pixels whose colour matches the goal colour.
    pub goal_mask: Grid<bool>,
    /// Pixels covered by any object.
    pub all_mask: Grid<bool>,
    /// Id of the visible object per pixel, -1 for the table.
    pub ids: Grid<i32>,
}

impl Observation {
    pub fn resolution(&self) -> usize {
        self.depth.size
    }

    /// Mask of the pixels showing object `id`.
    pub fn object_mask(&self, id: u32) -> Grid<bool> {
        self.ids.map(|x| x == id as i32)
    }

    /// Copy with the goal mask replaced.
    pub fn with_goal_mask(&self, mask: Grid<bool>) -> Observation {
        Observation {
            goal_mask: mask,
            ..self.clone()
        }
    }
}

/// Visible object id per pixel: tallest footprint covering the pixel centre wins.
fn render_ids(scene: &Scene, resolution: usize) -> Grid<i32> {
    let mut ids = Grid::filled(resolution, -1i32);
    let mut order: Vec<usize> = (0..scene.objects.len()).collect();
    order.sort_by(|&a, &b| {
        let (oa, ob) = (&scene.objects[a], &scene.objects[b]);
        oa.height.total_cmp(&ob.height).then(oa.id.cmp(&ob.id))
    });
    let h = resolution as f64;
    for i in order {
        let obj = &scene.objects[i];
        let fp = obj.footprint();
        let bb = fp.aabb();
        let lo = |x: f64| ((x * h - 0.5).floor().max(0.0)) as usize;
        let hi = |x: f64| ((x * h - 0.5).ceil().max(-1.0) as i64).min(resolution as i64 - 1);
        let (u_hi, v_hi) = (hi(bb.max.x), hi(bb.max.y));
        if u_hi < 0 || v_hi < 0 {
            continue;
        }
        for v in lo(bb.min.y)..=v_hi as usize {
            for u in lo(bb.min.x)..=u_hi as usize {
                if fp.contains(pixel_center(u, v, resolution)) {
                    ids.set(u, v, obj.id as i32);
                }
            }
        }
    }
    ids
}

/// World coordinates of the centre of pixel `(u, v)`.
pub fn pixel_center(u: usize, v: usize, resolution: usize) -> Vec2 {
    let h = resolution as f64;
    Vec2::new((u as f64 + 0.5) / h, (v as f64 + 0.5) / h)
}

/// Pixel containing world point `p`, if inside the raster.
pub fn world_to_pixel(p: Vec2, resolution: usize) -> Option<(usize, usize)> {
    let h = resolution as f64;
    let (u, v) = ((p.x * h).floor(), (p.y * h).floor());
    (u >= 0.0 && v >= 0.0 && u < h && v < h).then_some((u as usize, v as usize))
}

pub fn render_depth(scene: &Scene, resolution: usize, max_height: f64) -> Grid<f32> {
    let ids = render_ids(scene, resolution);
    depth_from_ids(scene, &ids, max_height)
}

fn depth_from_ids(scene: &Scene, ids: &Grid<i32>, max_height: f64) -> Grid<f32> {
    ids.map(|id| {
        if id < 0 {
            0.0
        } else {
            let o = scene.object(id as u32).expect("rendered id exists");
            (o.height / max_height).clamp(0.0, 1.0) as f32
        }
    })
}

/// Renders colour, depth, goal mask (colour segmentation) and object mask.
pub fn render(scene: &Scene, resolution: usize, max_height: f64) -> Observation {
    let ids = render_ids(scene, resolution);
    let depth = depth_from_ids(scene, &ids, max_height);
    let channel = |c: usize| {
        ids.map(|id| {
            if id < 0 {
                0.0
            } else {
                let o = scene.object(id as u32).expect("rendered id exists");
                PALETTE[o.color_id as usize % PALETTE.len()][c] as f32 / 255.0
            }
        })
    };
    let color = [channel(0), channel(1), channel(2)];
    let goal_mask = goal_mask_from_color(&color);
    let all_mask = ids.map(|id| id >= 0);
    Observation {
        color,
        depth,
        goal_mask,
        all_mask,
        ids,
    }
}

/// Goal mask by colour segmentation of the reserved goal colour.
pub fn goal_mask_from_color(color: &[Grid<f32>; 3]) -> Grid<bool> {
    segment_color(color, PALETTE[GOAL_COLOR_ID as usize])
}

/// Pixels whose colour equals `rgb` (8-bit quantised).
pub fn segment_color(color: &[Grid<f32>; 3], rgb: [u8; 3]) -> Grid<bool> {
    let size = color[0].size;
    let data = (0..size * size)
        .map(|i| (0..3).all(|c| (color[c].data[i] * 255.0).round() as i32 == rgb[c] as i32))
        .collect();
    Grid { size, data }
}

/// Continuous pixel-frame point (pixel centres at `+0.5`) that pixel `(u, v)`
/// of rotated view `k` samples from the unrotated image.
fn source_point(k: usize, u: usize, v: usize, resolution: usize) -> Vec2 {
    let c = resolution as f64 / 2.0;
    let p = Vec2::new(u as f64 + 0.5 - c, v as f64 + 0.5 - c);
    p.rotated(rotation_angle(k)) + Vec2::new(c, c)
}

/// World pose of action pixel `(u, v)` in rotated view `k`; `theta` is the
/// action angle. The position may fall outside the workspace for pixels near
/// the corners of the rotated view.
pub fn decode_pixel(k: usize, u: usize, v: usize, resolution: usize) -> Result<Pose> {
    if k >= ROTATIONS || u >= resolution || v >= resolution {
        return Err(Error::InvalidAction(format!(
            "pixel action (k={k}, u={u}, v={v}) outside {ROTATIONS}x{resolution}x{resolution}"
        )));
    }
    let p = source_point(k, u, v, resolution);
    let h = resolution as f64;
    Ok(Pose {
        x: p.x / h,
        y: p.y / h,
        theta: rotation_angle(k),
    })
}

/// Pixel of rotated view `k` whose decoded position is closest to world `p`.
pub fn encode_pixel(k: usize, p: Vec2, resolution: usize) -> Option<(usize, usize)> {
    let h = resolution as f64;
    let c = h / 2.0;
    let q = (p * h - Vec2::new(c, c)).rotated(-rotation_angle(k)) + Vec2::new(c, c);
    let (u, v) = ((q.x).floor(), (q.y).floor());
    (u >= 0.0 && v >= 0.0 && u < h && v < h).then_some((u as usize, v as usize))
}

/// One orientation of the observation, resampled so that the action
/// direction of view `k` is image +u.
#[derive(Debug, Clone, PartialEq)]
pub struct RotatedObs {
    pub k: usize,
    pub color: [Grid<f32>; 3],
    pub depth: Grid<f32>,
    pub goal_mask: Grid<bool>,
    pub all_mask: Grid<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotatedStack {
    pub views: Vec<RotatedObs>,
}

impl RotatedStack {
    pub fn resolution(&self) -> usize {
        self.views[0].depth.size
    }
}

fn bilinear(img: &Grid<f32>, q: Vec2) -> f32 {
    let x = q.x - 0.5;
    let y = q.y - 0.5;
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let at = |u: i64, v: i64| img.get_signed(u, v).unwrap_or(0.0);
    let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
    let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

fn nearest(mask: &Grid<bool>, q: Vec2) -> bool {
    mask.get_signed(q.x.floor() as i64, q.y.floor() as i64).unwrap_or(false)
}

/// Resamples `obs` into view `k`: bilinear for colour and depth, nearest for
/// masks, zero outside the source image.
pub fn rotate_observation(obs: &Observation, k: usize) -> RotatedObs {
    let size = obs.resolution();
    let points: Vec<Vec2> = (0..size * size).map(|i| source_point(k, i % size, i / size, size)).collect();
    let resample = |img: &Grid<f32>| Grid {
        size,
        data: points.iter().map(|&q| bilinear(img, q)).collect(),
    };
    let resample_mask = |m: &Grid<bool>| Grid {
        size,
        data: points.iter().map(|&q| nearest(m, q)).collect(),
    };
    RotatedObs {
        k,
        color: [resample(&obs.color[0]), resample(&obs.color[1]), resample(&obs.color[2])],
        depth: resample(&obs.depth),
        goal_mask: resample_mask(&obs.goal_mask),
        all_mask: resample_mask(&obs.all_mask),
    }
}

pub fn build_rotated_stack(obs: &Observation) -> RotatedStack {
    RotatedStack {
        views: (0..ROTATIONS).map(|k| rotate_observation(obs, k)).collect(),
    }
}

fn png_writer(path: &Path, size: usize, color: png::ColorType, depth: png::BitDepth) -> Result<png::Writer<BufWriter<File>>> {
    let file = File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), size as u32, size as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    enc.write_header().map_err(|e| Error::Io(std::io::Error::other(e)))
}

fn finish(mut w: png::Writer<BufWriter<File>>, data: &[u8]) -> Result<()> {
    w.write_image_data(data).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    w.finish().map_err(|e| Error::Io(std::io::Error::other(e)))
}

fn to_u8(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit RGB image.
pub fn write_color_png(color: &[Grid<f32>; 3], path: &Path) -> Result<()> {
    let size = color[0].size;
    let data: Vec<u8> = (0..size * size).flat_map(|i| (0..3).map(move |c| to_u8(color[c].data[i]))).collect();
    finish(png_writer(path, size, png::ColorType::Rgb, png::BitDepth::Eight)?, &data)
}

/// 16-bit greyscale image of depth in `[0, 1]`.
pub fn write_depth_png(depth: &Grid<f32>, path: &Path) -> Result<()> {
    let data: Vec<u8> = depth
        .data
        .iter()
        .flat_map(|&d| ((d.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes())
        .collect();
    finish(png_writer(path, depth.size, png::ColorType::Grayscale, png::BitDepth::Sixteen)?, &data)
}

/// 1-bit mask image.
pub fn write_mask_png(mask: &Grid<bool>, path: &Path) -> Result<()> {
    let size = mask.size;
    let stride = size.div_ceil(8);
    let mut data = vec![0u8; stride * size];
    for v in 0..size {
        for u in 0..size {
            if mask.get(u, v) {
                data[v * stride + u / 8] |= 0x80 >> (u % 8);
            }
        }
    }
    finish(png_writer(path, size, png::ColorType::Grayscale, png::BitDepth::One)?, &data)
}
