//! Oriented 3D boxes, their corners, and rotated IoU.
//!
//! Boxes rotate about the vertical axis only, so every overlap computation
//! splits into a convex footprint intersection in the ground plane and a
//! one-dimensional overlap along `z`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Wraps an angle into `[-π, π)`.
pub fn normalize_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let wrapped = theta - two_pi * ((theta + PI) / two_pi).floor();
    if wrapped >= PI {
        wrapped - two_pi
    } else if wrapped < -PI {
        wrapped + two_pi
    } else {
        wrapped
    }
}

/// A ground-truth or decoded object: center, size, heading and class.
///
/// `theta` is the heading about the vertical axis, measured from `+x`
/// towards `+y`. The length `l` runs along the heading direction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
    pub class_id: usize,
}

impl Box3D {
    /// Builds a box, normalizing `theta` into `[-π, π)`.
    pub fn new(center: [f64; 3], size: [f64; 3], theta: f64, class_id: usize) -> Result<Self> {
        let finite = center.iter().chain(size.iter()).all(|v| v.is_finite()) && theta.is_finite();
        if !finite {
            return Err(Error::NonFinite("box parameters".into()));
        }
        if size.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config(format!("box size must be positive, got {size:?}")));
        }
        Ok(Self {
            x: center[0],
            y: center[1],
            z: center[2],
            l: size[0],
            w: size[1],
            h: size[2],
            theta: normalize_angle(theta),
            class_id,
        })
    }

    pub fn center(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn size(&self) -> [f64; 3] {
        [self.l, self.w, self.h]
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    pub fn bottom(&self) -> f64 {
        self.z - 0.5 * self.h
    }

    pub fn top(&self) -> f64 {
        self.z + 0.5 * self.h
    }

    /// Footprint corners, counter-clockwise starting at the `(+l/2, +w/2)`
    /// corner in the box frame.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.theta.sin_cos();
        let (hl, hw) = (0.5 * self.l, 0.5 * self.w);
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[a, b]| [self.x + a * c - b * s, self.y + a * s + b * c])
    }
}

/// The eight corners of a box.
///
/// Order: the bottom face counter-clockwise starting at the `(+l/2, +w/2)`
/// corner, then the top face in the same order. The footprint is rotated by
/// `theta` about the vertical axis through the box center.
pub fn box_corners(b: &Box3D) -> [[f64; 3]; 8] {
    let foot = b.footprint();
    let (z0, z1) = (b.bottom(), b.top());
    let mut out = [[0.0; 3]; 8];
    for (i, [x, y]) in foot.into_iter().enumerate() {
        out[i] = [x, y, z0];
        out[i + 4] = [x, y, z1];
    }
    out
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Shoelace area of a simple polygon (positive when counter-clockwise).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let [x0, y0] = poly[i];
            let [x1, y1] = poly[(i + 1) % n];
            x0 * y1 - x1 * y0
        })
        .sum();
    0.5 * twice
}

/// Sutherland–Hodgman clipping of `subject` against a convex,
/// counter-clockwise `clip` polygon.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(segment_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(segment_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

fn segment_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let cp = cross(a, b, p);
    let cq = cross(a, b, q);
    let denom = cp - cq;
    if denom == 0.0 {
        return q;
    }
    let t = cp / denom;
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Area of the intersection of two box footprints.
pub fn footprint_intersection(a: &Box3D, b: &Box3D) -> f64 {
    // cheap circumscribed-circle rejection
    let ra = 0.5 * a.l.hypot(a.w);
    let rb = 0.5 * b.l.hypot(b.w);
    if (a.x - b.x).hypot(a.y - b.y) > ra + rb {
        return 0.0;
    }
    let poly = clip_convex(&a.footprint(), &b.footprint());
    polygon_area(&poly).max(0.0)
}

/// Bird's-eye-view IoU of the two rotated footprints.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter = footprint_intersection(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.l * a.w + b.l * b.w - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Volumetric IoU of two vertically-aligned oriented boxes.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    if a.center() == b.center() && a.size() == b.size() && a.theta == b.theta {
        return 1.0;
    }
    let dz = a.top().min(b.top()) - a.bottom().max(b.bottom());
    if dz <= 0.0 {
        return 0.0;
    }
    let inter = footprint_intersection(a, b) * dz;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}
