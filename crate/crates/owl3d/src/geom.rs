//! Exact geometry for yaw-rotated (gravity-aligned) 3D boxes.
//!
//! BEV rectangle intersection is computed by Sutherland-Hodgman convex
//! clipping, which is exact for convex quads; 3D IoU stacks the BEV
//! intersection with the vertical overlap. All operations are pure.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Degenerate-area / collinearity epsilon for polygon clipping, in m².
pub const AREA_EPS: f64 = 1e-9;

/// Wrap an angle into (-pi, pi].
pub fn normalize_yaw(yaw: f64) -> f64 {
    let mut r = yaw % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Oriented 3D box: geometric center, extents along the local axes, and a
/// yaw rotation about world +z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    /// Extent along local x.
    pub l: f64,
    /// Extent along local y.
    pub w: f64,
    /// Extent along local z (vertical).
    pub h: f64,
    /// Rotation about world +z, in (-pi, pi].
    pub yaw: f64,
}

impl Box3D {
    pub fn new(cx: f64, cy: f64, cz: f64, l: f64, w: f64, h: f64, yaw: f64) -> Self {
        Box3D {
            cx,
            cy,
            cz,
            l,
            w,
            h,
            yaw: normalize_yaw(yaw),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("box has non-finite field"));
        }
        if self.l <= 0.0 || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::invalid(format!(
                "box dimensions must be positive, got ({}, {}, {})",
                self.l, self.w, self.h
            )));
        }
        if self.yaw <= -PI || self.yaw > PI {
            return Err(Error::invalid(format!(
                "yaw {} outside (-pi, pi]",
                self.yaw
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> [f64; 3] {
        [self.cx, self.cy, self.cz]
    }

    pub fn dims(&self) -> [f64; 3] {
        [self.l, self.w, self.h]
    }

    /// BEV footprint corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = self.l / 2.0;
        let hw = self.w / 2.0;
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[x, y]| [self.cx + c * x - s * y, self.cy + s * x + c * y])
    }

    /// Vertical extent as (bottom, top).
    pub fn z_interval(&self) -> (f64, f64) {
        (self.cz - self.h / 2.0, self.cz + self.h / 2.0)
    }

    /// World point expressed in the box-local frame (translate by -center,
    /// rotate by -yaw).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.cx;
        let dy = p[1] - self.cy;
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.cz]
    }

    /// Box-local point expressed in the world frame.
    pub fn to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.cx + c * p[0] - s * p[1],
            self.cy + s * p[0] + c * p[1],
            self.cz + p[2],
        ]
    }

    /// Boundary-inclusive containment in the box-local frame.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let q = self.to_local(p);
        q[0].abs() <= self.l / 2.0 && q[1].abs() <= self.w / 2.0 && q[2].abs() <= self.h / 2.0
    }
}

/// One LiDAR return: position in meters plus unit-interval intensity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Point { x, y, z, intensity }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// A sequence of points. Coordinates are kept in f64 internally; the
/// on-disk format is little-endian f32 quads (see `sceneio`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Unsigned polygon area by the shoelace formula.
fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let j = (i + 1) % poly.len();
        acc += poly[i][0] * poly[j][1] - poly[j][0] * poly[i][1];
    }
    acc.abs() * 0.5
}

fn segment_line_intersection(p1: [f64; 2], p2: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let d = [p2[0] - p1[0], p2[1] - p1[1]];
    let e = [b[0] - a[0], b[1] - a[1]];
    let den = d[0] * e[1] - d[1] * e[0];
    if den.abs() < f64::MIN_POSITIVE {
        // Collinear within rounding; either endpoint is on the line.
        return p2;
    }
    let t = ((a[0] - p1[0]) * e[1] - (a[1] - p1[1]) * e[0]) / den;
    [p1[0] + t * d[0], p1[1] + t * d[1]]
}

/// Sutherland-Hodgman clip of `subject` by a convex counter-clockwise
/// `clip` polygon. Points on a clip edge count as inside.
fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        let inside = |p: [f64; 2]| cross(a, b, p) >= -AREA_EPS;
        for k in 0..input.len() {
            let cur = input[k];
            let prev = input[(k + input.len() - 1) % input.len()];
            let cur_in = inside(cur);
            let prev_in = inside(prev);
            if cur_in {
                if !prev_in {
                    output.push(segment_line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(segment_line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

/// Area of the BEV intersection of two boxes.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let inter = clip_polygon(&a.bev_corners(), &b.bev_corners());
    polygon_area(&inter)
}

/// BEV IoU of the two yaw-rotated footprint rectangles.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let ca = a.bev_corners();
    let cb = b.bev_corners();
    let inter = polygon_area(&clip_polygon(&ca, &cb));
    if inter <= AREA_EPS {
        return 0.0;
    }
    let area_a = polygon_area(&ca);
    let area_b = polygon_area(&cb);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// 3D IoU: BEV intersection area times vertical overlap over the volume
/// union. Volumes are derived from the same BEV areas and z-intervals as
/// the intersection so that identical boxes give exactly 1.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let ca = a.bev_corners();
    let cb = b.bev_corners();
    let inter_bev = polygon_area(&clip_polygon(&ca, &cb));
    if inter_bev <= AREA_EPS {
        return 0.0;
    }
    let (a_bot, a_top) = a.z_interval();
    let (b_bot, b_top) = b.z_interval();
    let z_overlap = a_top.min(b_top) - a_bot.max(b_bot);
    if z_overlap <= 0.0 {
        return 0.0;
    }
    let vol_inter = inter_bev * z_overlap;
    let vol_a = polygon_area(&ca) * (a_top - a_bot);
    let vol_b = polygon_area(&cb) * (b_top - b_bot);
    let union = vol_a + vol_b - vol_inter;
    if union <= 0.0 {
        return 0.0;
    }
    (vol_inter / union).clamp(0.0, 1.0)
}

/// Indices of points inside the box, boundary inclusive.
pub fn points_in_box(pc: &PointCloud, b: &Box3D) -> Vec<usize> {
    pc.points
        .iter()
        .enumerate()
        .filter(|(_, p)| b.contains(p.xyz()))
        .map(|(i, _)| i)
        .collect()
}

/// Rigidly move an object: points rotate by `new_yaw - old_yaw` about the
/// old center, then translate so the box center lands on `new_center`.
pub fn transform_object(
    pc: &PointCloud,
    b: &Box3D,
    new_center: [f64; 3],
    new_yaw: f64,
) -> (PointCloud, Box3D) {
    let dyaw = new_yaw - b.yaw;
    let (s, c) = dyaw.sin_cos();
    let points = pc
        .points
        .iter()
        .map(|p| {
            let dx = p.x - b.cx;
            let dy = p.y - b.cy;
            let dz = p.z - b.cz;
            Point {
                x: new_center[0] + c * dx - s * dy,
                y: new_center[1] + s * dx + c * dy,
                z: new_center[2] + dz,
                intensity: p.intensity,
            }
        })
        .collect();
    let out_box = Box3D::new(
        new_center[0],
        new_center[1],
        new_center[2],
        b.l,
        b.w,
        b.h,
        new_yaw,
    );
    (PointCloud::new(points), out_box)
}

/// Anisotropically rescale an object about its box center. Scaling is done
/// as divide-then-multiply on box-local coordinates so that containment is
/// preserved exactly.
pub fn resize_object(
    pc: &PointCloud,
    b: &Box3D,
    target_dims: [f64; 3],
) -> Result<(PointCloud, Box3D)> {
    if target_dims.iter().any(|d| !d.is_finite() || *d <= 0.0) {
        return Err(Error::invalid(format!(
            "target dims must be positive, got {:?}",
            target_dims
        )));
    }
    let points = pc
        .points
        .iter()
        .map(|p| {
            let local = b.to_local(p.xyz());
            let scaled = [
                local[0] / b.l * target_dims[0],
                local[1] / b.w * target_dims[1],
                local[2] / b.h * target_dims[2],
            ];
            let world = b.to_world(scaled);
            Point {
                x: world[0],
                y: world[1],
                z: world[2],
                intensity: p.intensity,
            }
        })
        .collect();
    let out_box = Box3D::new(
        b.cx,
        b.cy,
        b.cz,
        target_dims[0],
        target_dims[1],
        target_dims[2],
        b.yaw,
    );
    Ok((PointCloud::new(points), out_box))
}

/// Euclidean distance between box centers (full 3D).
pub fn center_distance(a: &Box3D, b: &Box3D) -> f64 {
    let dx = a.cx - b.cx;
    let dy = a.cy - b.cy;
    let dz = a.cz - b.cz;
    (dx * dx + dy * dy + dz * dz).sqrt()
}
