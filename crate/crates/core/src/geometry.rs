//! Planar convex geometry used by the simulator: points, convex polygons,
//! discs, separating-axis overlap tests and clipped intersection areas.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Unit vector at `angle` radians from the +x axis.
    pub fn from_angle(angle: f64) -> Self {
        Self::new(angle.cos(), angle.sin())
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec2 {
        let n = self.norm();
        if n > 0.0 {
            self * (1.0 / n)
        } else {
            self
        }
    }

    /// Counter-clockwise perpendicular in a y-up frame.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn rotated(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn distance(self, o: Vec2) -> f64 {
        (self - o).norm()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec2,
    pub max: Vec2,
}

impl Aabb {
    pub fn overlaps(&self, o: &Aabb) -> bool {
        self.min.x <= o.max.x && o.min.x <= self.max.x && self.min.y <= o.max.y && o.min.y <= self.max.y
    }

    pub fn inflated(&self, r: f64) -> Aabb {
        Aabb {
            min: self.min - Vec2::new(r, r),
            max: self.max + Vec2::new(r, r),
        }
    }
}

/// Convex polygon, vertices in counter-clockwise order (positive signed area).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon {
    pub vertices: Vec<Vec2>,
}

impl ConvexPolygon {
    pub fn new(mut vertices: Vec<Vec2>) -> Self {
        if signed_area(&vertices) < 0.0 {
            vertices.reverse();
        }
        Self { vertices }
    }

    /// Rectangle centred at `center`, with half extents along its local axes and rotated by `angle`.
    pub fn rectangle(center: Vec2, half_x: f64, half_y: f64, angle: f64) -> Self {
        let ax = Vec2::from_angle(angle);
        let ay = ax.perp();
        let corners = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
        Self::new(
            corners
                .iter()
                .map(|&(sx, sy)| center + ax * (sx * half_x) + ay * (sy * half_y))
                .collect(),
        )
    }

    /// Regular polygon inscribed in a circle; used for area computations involving discs.
    pub fn regular(center: Vec2, radius: f64, sides: usize) -> Self {
        let step = std::f64::consts::TAU / sides as f64;
        Self::new((0..sides).map(|i| center + Vec2::from_angle(step * i as f64) * radius).collect())
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices).abs()
    }

    pub fn translated(&self, d: Vec2) -> Self {
        Self {
            vertices: self.vertices.iter().map(|&v| v + d).collect(),
        }
    }

    pub fn centroid(&self) -> Vec2 {
        let n = self.vertices.len() as f64;
        self.vertices.iter().fold(Vec2::ZERO, |a, &v| a + v) * (1.0 / n)
    }

    fn edge_normals(&self) -> impl Iterator<Item = Vec2> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| {
            let e = self.vertices[(i + 1) % n] - self.vertices[i];
            Vec2::new(e.y, -e.x).normalized()
        })
    }
}

fn signed_area(v: &[Vec2]) -> f64 {
    let n = v.len();
    (0..n).map(|i| v[i].cross(v[(i + 1) % n])).sum::<f64>() * 0.5
}

/// Footprint of an object on the table plane.
#[derive(Debug, Clone, PartialEq)]
pub enum Footprint {
    Polygon(ConvexPolygon),
    Disc { center: Vec2, radius: f64 },
}

impl Footprint {
    pub fn aabb(&self) -> Aabb {
        match self {
            Footprint::Polygon(p) => {
                let mut min = Vec2::new(f64::INFINITY, f64::INFINITY);
                let mut max = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
                for v in &p.vertices {
                    min = Vec2::new(min.x.min(v.x), min.y.min(v.y));
                    max = Vec2::new(max.x.max(v.x), max.y.max(v.y));
                }
                Aabb { min, max }
            }
            Footprint::Disc { center, radius } => Aabb {
                min: *center - Vec2::new(*radius, *radius),
                max: *center + Vec2::new(*radius, *radius),
            },
        }
    }

    pub fn contains(&self, p: Vec2) -> bool {
        match self {
            Footprint::Polygon(poly) => {
                let n = poly.vertices.len();
                (0..n).all(|i| {
                    let a = poly.vertices[i];
                    let b = poly.vertices[(i + 1) % n];
                    (b - a).cross(p - a) >= 0.0
                })
            }
            Footprint::Disc { center, radius } => (p - *center).dot(p - *center) <= radius * radius,
        }
    }

    /// Interval covered by the projection onto `axis` (unit length).
    pub fn project(&self, axis: Vec2) -> (f64, f64) {
        match self {
            Footprint::Polygon(p) => p.vertices.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                let d = v.dot(axis);
                (lo.min(d), hi.max(d))
            }),
            Footprint::Disc { center, radius } => {
                let c = center.dot(axis);
                (c - radius, c + radius)
            }
        }
    }

    pub fn translated(&self, d: Vec2) -> Footprint {
        match self {
            Footprint::Polygon(p) => Footprint::Polygon(p.translated(d)),
            Footprint::Disc { center, radius } => Footprint::Disc {
                center: *center + d,
                radius: *radius,
            },
        }
    }

    pub fn center(&self) -> Vec2 {
        match self {
            Footprint::Polygon(p) => p.centroid(),
            Footprint::Disc { center, .. } => *center,
        }
    }

    pub fn area(&self) -> f64 {
        match self {
            Footprint::Polygon(p) => p.area(),
            Footprint::Disc { radius, .. } => std::f64::consts::PI * radius * radius,
        }
    }

    /// Polygonal approximation (exact for polygons).
    pub fn as_polygon(&self) -> ConvexPolygon {
        match self {
            Footprint::Polygon(p) => p.clone(),
            Footprint::Disc { center, radius } => ConvexPolygon::regular(*center, *radius, DISC_SIDES),
        }
    }
}

/// Number of sides used when a disc must be treated as a polygon (area only).
pub const DISC_SIDES: usize = 64;

/// Separating-axis penetration between two footprints.
///
/// Returns `(normal, depth)` where `normal` is a unit vector pointing from `a`
/// towards `b` and `depth` the overlap length along it, or `None` when the
/// shapes are separated (or merely touching).
pub fn penetration(a: &Footprint, b: &Footprint) -> Option<(Vec2, f64)> {
    if !a.aabb().overlaps(&b.aabb()) {
        return None;
    }
    let mut axes: Vec<Vec2> = Vec::with_capacity(10);
    match (a, b) {
        (Footprint::Disc { center: ca, .. }, Footprint::Disc { center: cb, .. }) => {
            let d = *cb - *ca;
            axes.push(if d.norm() > 0.0 { d.normalized() } else { Vec2::new(1.0, 0.0) });
        }
        (Footprint::Polygon(p), Footprint::Disc { center, .. }) | (Footprint::Disc { center, .. }, Footprint::Polygon(p)) => {
            axes.extend(p.edge_normals());
            let closest = p
                .vertices
                .iter()
                .copied()
                .min_by(|u, v| u.distance(*center).total_cmp(&v.distance(*center)))
                .expect("polygon has vertices");
            let d = *center - closest;
            if d.norm() > 0.0 {
                axes.push(d.normalized());
            }
        }
        (Footprint::Polygon(p), Footprint::Polygon(q)) => {
            axes.extend(p.edge_normals());
            axes.extend(q.edge_normals());
        }
    }
    let mut best: Option<(Vec2, f64)> = None;
    for axis in axes {
        let (a0, a1) = a.project(axis);
        let (b0, b1) = b.project(axis);
        let depth = a1.min(b1) - a0.max(b0);
        if depth <= 0.0 {
            return None;
        }
        if best.map_or(true, |(_, d)| depth < d) {
            best = Some((axis, depth));
        }
    }
    best.map(|(axis, depth)| {
        let dir = b.center() - a.center();
        if dir.dot(axis) < 0.0 {
            (-axis, depth)
        } else {
            (axis, depth)
        }
    })
}

/// Penetration depth between two footprints, `0.0` when separated.
pub fn overlap_depth(a: &Footprint, b: &Footprint) -> f64 {
    penetration(a, b).map_or(0.0, |(_, d)| d)
}

/// Area of the intersection of a convex polygon with a footprint.
pub fn intersection_area(clip: &ConvexPolygon, subject: &Footprint) -> f64 {
    let poly = subject.as_polygon();
    clip_polygon(&poly.vertices, &clip.vertices).map_or(0.0, |v| signed_area(&v).abs())
}

/// Sutherland–Hodgman clipping of `subject` by the convex CCW polygon `clip`.
fn clip_polygon(subject: &[Vec2], clip: &[Vec2]) -> Option<Vec<Vec2>> {
    let mut output = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            return None;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let edge = b - a;
        let inside = |p: Vec2| edge.cross(p - a) >= 0.0;
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let (ci, pi) = (inside(cur), inside(prev));
            if ci {
                if !pi {
                    output.push(segment_line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if pi {
                output.push(segment_line_intersection(prev, cur, a, b));
            }
        }
    }
    if output.len() < 3 {
        None
    } else {
        Some(output)
    }
}

fn segment_line_intersection(p: Vec2, q: Vec2, a: Vec2, b: Vec2) -> Vec2 {
    let r = q - p;
    let s = b - a;
    let denom = r.cross(s);
    if denom.abs() < 1e-18 {
        return p;
    }
    let t = (a - p).cross(s) / denom;
    p + r * t
}

/// Smallest `t >= 0` such that `moving` translated by `t * dir` no longer
/// overlaps `fixed` (depth at most `tol`). `dir` must be a unit vector.
pub fn separation_along(moving: &Footprint, fixed: &Footprint, dir: Vec2, tol: f64) -> f64 {
    if overlap_depth(moving, fixed) <= tol {
        return 0.0;
    }
    // Past this offset the projections onto `dir` are disjoint.
    let (m0, _) = moving.project(dir);
    let (_, f1) = fixed.project(dir);
    let mut hi = (f1 - m0).max(0.0) + 1e-9;
    let mut lo = 0.0;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if overlap_depth(&moving.translated(dir * mid), fixed) > tol {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}
