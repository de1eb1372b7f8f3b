//! Synthetic turntable rig with exact ground truth.
//!
//! The reference frame is the turntable: origin at the chessboard center,
//! Z up, board and table top at `z = 0`. Turning the table by `θ` is modeled
//! as the camera moving by `−θ` around Z. Objects are unions of analytic
//! primitives, rendered by per-pixel ray casting.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationSet, CorrespondenceSet};
use crate::cloud::Aabb;
use crate::error::{Error, Result};
use crate::geometry::{DepthMap, Mat3, PinholeCamera, RgbImage, RigidTransform, TriangleMesh, Vec2, Vec3};
use crate::io::{u8_to_color, write_corners, write_json, write_pfm, write_ppm};
use crate::session::{CaptureSession, SceneRecord, MANIFEST_VERSION};

const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chessboard {
    /// Inner corners along Y.
    pub rows: usize,
    /// Inner corners along X.
    pub cols: usize,
    pub square_mm: f64,
}

impl Chessboard {
    /// Inner corners in the reference frame, row by row.
    pub fn corners(&self) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(Vec3::new(
                    (c as f64 - (self.cols - 1) as f64 / 2.0) * self.square_mm,
                    (r as f64 - (self.rows - 1) as f64 / 2.0) * self.square_mm,
                    0.0,
                ));
            }
        }
        out
    }

    fn half_extent(&self) -> (f64, f64) {
        ((self.cols + 1) as f64 * self.square_mm / 2.0, (self.rows + 1) as f64 * self.square_mm / 2.0)
    }

    /// Dark or light square under `p` (on the board), `None` off the board.
    fn shade(&self, p: &Vec3) -> Option<bool> {
        let (hx, hy) = self.half_extent();
        if p.x.abs() > hx || p.y.abs() > hy {
            return None;
        }
        let i = ((p.x + hx) / self.square_mm).floor() as i64;
        let j = ((p.y + hy) / self.square_mm).floor() as i64;
        Some((i + j) % 2 == 0)
    }
}

/// Camera placement on the arm: looks at `(0, 0, target_height_mm)` from the
/// given elevation above the table and distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmPosition {
    pub elevation_deg: f64,
    pub distance_mm: f64,
    pub target_height_mm: f64,
}

impl ArmPosition {
    /// Reference → camera at table angle 0.
    pub fn pose(&self) -> RigidTransform {
        let e = self.elevation_deg.to_radians();
        let target = Vec3::new(0.0, 0.0, self.target_height_mm);
        let center = target + Vec3::new(0.0, -e.cos(), e.sin()) * self.distance_mm;
        look_at(&center, &target)
    }
}

/// Camera at `center` looking at `target`, image x to the right of the view
/// and image y pointing down toward the table.
pub fn look_at(center: &Vec3, target: &Vec3) -> RigidTransform {
    let f = (target - center).normalize();
    let r = f.cross(&Vec3::z()).normalize();
    let d = f.cross(&r);
    let rot = Mat3::from_rows(&[r.transpose(), d.transpose(), f.transpose()]);
    RigidTransform::new(rot, -(rot * center))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigConfig {
    pub depth_camera: PinholeCamera,
    pub rgb_camera: PinholeCamera,
    /// RGB camera frame → depth camera frame.
    pub relative: RigidTransform,
    pub arm_positions: Vec<ArmPosition>,
    pub angle_step_deg: f64,
    pub angles: usize,
    pub chessboard: Chessboard,
    pub table_radius_mm: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        RigConfig {
            depth_camera: PinholeCamera { fx: 800.0, fy: 800.0, cx: 319.5, cy: 239.5, width: 640, height: 480 },
            rgb_camera: PinholeCamera { fx: 1200.0, fy: 1200.0, cx: 479.5, cy: 359.5, width: 960, height: 720 },
            relative: RigidTransform::from_rotation_vector(Vec3::new(0.004, -0.012, 0.003)).with_translation(Vec3::new(-45.0, 1.5, 0.8)),
            arm_positions: vec![
                ArmPosition { elevation_deg: 60.0, distance_mm: 300.0, target_height_mm: 40.0 },
                ArmPosition { elevation_deg: 25.0, distance_mm: 300.0, target_height_mm: 40.0 },
            ],
            angle_step_deg: 22.5,
            angles: 16,
            chessboard: Chessboard { rows: 11, cols: 15, square_mm: 20.0 },
            table_radius_mm: 300.0,
        }
    }
}

impl RigConfig {
    pub fn validate(&self) -> Result<()> {
        self.depth_camera.validate()?;
        self.rgb_camera.validate()?;
        if self.angles == 0 {
            return Err(Error::InvalidConfig("at least one turntable angle is required".into()));
        }
        if ((self.angle_step_deg * self.angles as f64) - 360.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "angle step {}° × {} angles does not cover a full revolution",
                self.angle_step_deg, self.angles
            )));
        }
        if self.arm_positions.is_empty() {
            return Err(Error::InvalidConfig("at least one arm position is required".into()));
        }
        if self.chessboard.rows < 2 || self.chessboard.cols < 2 || !(self.chessboard.square_mm > 0.0) {
            return Err(Error::InvalidConfig("chessboard needs at least 2×2 inner corners and a positive square".into()));
        }
        if !self.relative.is_valid(1e-9) {
            return Err(Error::InvalidConfig("relative extrinsic is not a rigid transform".into()));
        }
        Ok(())
    }

    /// Nominal reference → depth-camera pose.
    pub fn depth_pose(&self, angle_index: usize, arm_index: usize) -> Result<RigidTransform> {
        if angle_index >= self.angles || arm_index >= self.arm_positions.len() {
            return Err(Error::IndexOutOfRange(format!(
                "angle {angle_index} of {}, arm {arm_index} of {}",
                self.angles,
                self.arm_positions.len()
            )));
        }
        let theta = (angle_index as f64 * self.angle_step_deg).to_radians();
        Ok(self.arm_positions[arm_index].pose().compose(&RigidTransform::rot_z(theta)))
    }

    pub fn rgb_pose_from_depth(&self, depth_pose: &RigidTransform) -> RigidTransform {
        self.relative.inverse().compose(depth_pose)
    }
}

/// Analytic solids in the object frame (object resting on `z = 0`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Box { center: Vec3, size: Vec3 },
    Sphere { center: Vec3, radius: f64 },
    /// Axis along +Z from `base`.
    Cylinder { base: Vec3, radius: f64, height: f64 },
    Union { parts: Vec<Primitive> },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    pub normal: Vec3,
}

fn nearer(a: Option<Hit>, b: Option<Hit>) -> Option<Hit> {
    match (a, b) {
        (Some(x), Some(y)) => Some(if y.t < x.t { y } else { x }),
        (x, None) => x,
        (None, y) => y,
    }
}

impl Primitive {
    /// Nearest intersection with `t > 0` along `origin + t·dir`.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<Hit> {
        match self {
            Primitive::Sphere { center, radius } => {
                let oc = origin - center;
                let a = dir.norm_squared();
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                // numerically stable pair of roots
                let q = if b > 0.0 { -(b + sq) } else { -b + sq };
                let (r1, r2) = (q / a, if q != 0.0 { c / q } else { 0.0 });
                let t = [r1.min(r2), r1.max(r2)].into_iter().find(|&t| t > HIT_EPS)?;
                let point = origin + dir * t;
                Some(Hit { t, point, normal: (point - center) / *radius })
            }
            Primitive::Box { center, size } => {
                let half = size * 0.5;
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let (mut n0, mut n1) = (Vec3::zeros(), Vec3::zeros());
                for a in 0..3 {
                    let (lo, hi) = (center[a] - half[a], center[a] + half[a]);
                    if dir[a] == 0.0 {
                        if origin[a] < lo || origin[a] > hi {
                            return None;
                        }
                        continue;
                    }
                    let (mut ta, mut tb) = ((lo - origin[a]) / dir[a], (hi - origin[a]) / dir[a]);
                    let mut na = Vec3::zeros();
                    na[a] = -1.0;
                    let mut nb = -na;
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                        std::mem::swap(&mut na, &mut nb);
                    }
                    if ta > t0 {
                        t0 = ta;
                        n0 = na;
                    }
                    if tb < t1 {
                        t1 = tb;
                        n1 = nb;
                    }
                }
                if t0 > t1 {
                    return None;
                }
                let (t, normal) = if t0 > HIT_EPS { (t0, n0) } else if t1 > HIT_EPS { (t1, n1) } else { return None };
                Some(Hit { t, point: origin + dir * t, normal })
            }
            Primitive::Cylinder { base, radius, height } => {
                let o = origin - base;
                let mut best = None;
                let (a, b, c) = (dir.x * dir.x + dir.y * dir.y, o.x * dir.x + o.y * dir.y, o.x * o.x + o.y * o.y - radius * radius);
                if a > 0.0 {
                    let disc = b * b - a * c;
                    if disc >= 0.0 {
                        let sq = disc.sqrt();
                        for t in [(-b - sq) / a, (-b + sq) / a] {
                            let z = o.z + t * dir.z;
                            if t > HIT_EPS && (0.0..=*height).contains(&z) {
                                let p = o + dir * t;
                                best = nearer(best, Some(Hit { t, point: base + p, normal: Vec3::new(p.x, p.y, 0.0) / *radius }));
                                break;
                            }
                        }
                    }
                }
                if dir.z != 0.0 {
                    for (z, n) in [(0.0, -Vec3::z()), (*height, Vec3::z())] {
                        let t = (z - o.z) / dir.z;
                        let p = o + dir * t;
                        if t > HIT_EPS && p.x * p.x + p.y * p.y <= radius * radius {
                            best = nearer(best, Some(Hit { t, point: base + p, normal: n }));
                        }
                    }
                }
                best
            }
            Primitive::Union { parts } => parts.iter().fold(None, |acc, p| nearer(acc, p.intersect(origin, dir))),
        }
    }

    /// Exact signed distance (negative inside); unions take the minimum.
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        match self {
            Primitive::Sphere { center, radius } => (p - center).norm() - radius,
            Primitive::Box { center, size } => {
                let q = (p - center).abs() - size * 0.5;
                q.sup(&Vec3::zeros()).norm() + q.max().min(0.0)
            }
            Primitive::Cylinder { base, radius, height } => {
                let o = p - base;
                let dr = (o.x * o.x + o.y * o.y).sqrt() - radius;
                let dz = (o.z - height / 2.0).abs() - height / 2.0;
                let outside = Vec3::new(dr.max(0.0), dz.max(0.0), 0.0).norm();
                outside + dr.max(dz).min(0.0)
            }
            Primitive::Union { parts } => parts.iter().map(|q| q.signed_distance(p)).fold(f64::INFINITY, f64::min),
        }
    }

    pub fn aabb(&self) -> Aabb {
        match self {
            Primitive::Sphere { center, radius } => Aabb { min: center - Vec3::repeat(*radius), max: center + Vec3::repeat(*radius) },
            Primitive::Box { center, size } => Aabb { min: center - size * 0.5, max: center + size * 0.5 },
            Primitive::Cylinder { base, radius, height } => Aabb {
                min: base - Vec3::new(*radius, *radius, 0.0),
                max: base + Vec3::new(*radius, *radius, *height),
            },
            Primitive::Union { parts } => {
                let boxes: Vec<Aabb> = parts.iter().map(Primitive::aabb).collect();
                let min = boxes.iter().fold(Vec3::repeat(f64::INFINITY), |m, b| m.inf(&b.min));
                let max = boxes.iter().fold(Vec3::repeat(f64::NEG_INFINITY), |m, b| m.sup(&b.max));
                Aabb { min, max }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Primitive::Sphere { radius, .. } => *radius > 0.0,
            Primitive::Box { size, .. } => size.iter().all(|&s| s > 0.0),
            Primitive::Cylinder { radius, height, .. } => *radius > 0.0 && *height > 0.0,
            Primitive::Union { parts } => {
                for p in parts {
                    p.validate()?;
                }
                !parts.is_empty()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("degenerate primitive {self:?}")))
        }
    }
}

/// Procedural albedo in the object frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Solid { color: [u8; 3] },
    /// 3D checker: parity of the cell index sum.
    Checker { square_mm: f64, a: [u8; 3], b: [u8; 3] },
    /// Linear ramp along one object axis, clamped at the ends.
    AxisGradient { axis: usize, from_mm: f64, to_mm: f64, a: [u8; 3], b: [u8; 3] },
}

impl Texture {
    /// Exact albedo in [0, 1].
    pub fn color_at(&self, p: &Vec3) -> Vec3 {
        match self {
            Texture::Solid { color } => u8_to_color(*color),
            Texture::Checker { square_mm, a, b } => {
                let k: i64 = (0..3).map(|i| (p[i] / square_mm).floor() as i64).sum();
                u8_to_color(if k.rem_euclid(2) == 0 { *a } else { *b })
            }
            Texture::AxisGradient { axis, from_mm, to_mm, a, b } => {
                let s = ((p[*axis] - from_mm) / (to_mm - from_mm)).clamp(0.0, 1.0);
                u8_to_color(*a) * (1.0 - s) + u8_to_color(*b) * s
            }
        }
    }

    /// Albedo quantized the way the RGB renderer stores it.
    pub fn rgb_at(&self, p: &Vec3) -> [u8; 3] {
        crate::geometry::color_to_u8(&self.color_at(p))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Primitive,
    pub texture: Texture,
}

impl ObjectSpec {
    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        let b = self.shape.aabb();
        if b.min.z.abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("object must rest on the table (lowest z = {})", b.min.z)));
        }
        if let Texture::AxisGradient { axis, from_mm, to_mm, .. } = &self.texture {
            if *axis > 2 || from_mm == to_mm {
                return Err(Error::InvalidConfig("gradient needs an axis in 0..3 and a non-empty range".into()));
            }
        }
        Ok(())
    }

    /// Upside-down placement: π about X, then lifted back onto the table.
    pub fn flip_transform(&self) -> RigidTransform {
        let b = self.shape.aabb();
        RigidTransform::rot_x(std::f64::consts::PI).with_translation(Vec3::new(0.0, b.min.y + b.max.y, b.min.z + b.max.z))
    }

    /// Object-frame → reference-frame placement for a scene.
    pub fn placement(&self, flipped: bool) -> RigidTransform {
        if flipped {
            self.flip_transform()
        } else {
            RigidTransform::identity()
        }
    }

    pub fn dimensions(&self) -> Vec3 {
        self.shape.aabb().extent()
    }

    /// A box 78×78×85.5 mm-class test object with a two-color checker.
    pub fn checker_box(size: Vec3, square_mm: f64) -> ObjectSpec {
        ObjectSpec {
            shape: Primitive::Box { center: Vec3::new(0.0, 0.0, size.z / 2.0), size },
            texture: Texture::Checker { square_mm, a: [225, 195, 60], b: [40, 70, 150] },
        }
    }

    /// Exact tessellation for boxes and spheres, with ground-truth vertex colors.
    pub fn tessellate(&self, target_edge_mm: f64) -> Result<TriangleMesh> {
        let mut mesh = match &self.shape {
            Primitive::Box { center, size } => tessellate_box(center, size, target_edge_mm),
            Primitive::Sphere { center, radius } => tessellate_sphere(center, *radius, target_edge_mm),
            other => return Err(Error::InvalidInput(format!("no exact tessellation for {other:?}"))),
        };
        mesh.vertex_colors = Some(mesh.vertices.iter().map(|p| self.texture.color_at(p)).collect());
        mesh.validate()?;
        Ok(mesh)
    }
}

fn tessellate_box(center: &Vec3, size: &Vec3, edge: f64) -> TriangleMesh {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        let (nu, nv) = ((size[u] / edge).ceil().max(1.0) as usize, (size[v] / edge).ceil().max(1.0) as usize);
        for sign in [-1.0, 1.0] {
            let base = vertices.len();
            for i in 0..=nu {
                for j in 0..=nv {
                    let mut p = *center;
                    p[axis] += sign * size[axis] / 2.0;
                    p[u] += (i as f64 / nu as f64 - 0.5) * size[u];
                    p[v] += (j as f64 / nv as f64 - 0.5) * size[v];
                    vertices.push(p);
                }
            }
            for i in 0..nu {
                for j in 0..nv {
                    let a = base + i * (nv + 1) + j;
                    let (b, c, d) = (a + nv + 1, a + nv + 2, a + 1);
                    // (u, v, axis) is right-handed, so u-then-v winding faces +axis
                    if sign > 0.0 {
                        triangles.push([a, b, c]);
                        triangles.push([a, c, d]);
                    } else {
                        triangles.push([a, c, b]);
                        triangles.push([a, d, c]);
                    }
                }
            }
        }
    }
    TriangleMesh { vertices, triangles, vertex_colors: None }
}

fn tessellate_sphere(center: &Vec3, radius: f64, edge: f64) -> TriangleMesh {
    let rings = ((std::f64::consts::PI * radius / edge).ceil() as usize).max(4);
    let segs = 2 * rings;
    let mut vertices = vec![center + Vec3::new(0.0, 0.0, radius)];
    for r in 1..rings {
        let phi = std::f64::consts::PI * r as f64 / rings as f64;
        for s in 0..segs {
            let th = std::f64::consts::TAU * s as f64 / segs as f64;
            vertices.push(center + Vec3::new(phi.sin() * th.cos(), phi.sin() * th.sin(), phi.cos()) * radius);
        }
    }
    vertices.push(center - Vec3::new(0.0, 0.0, radius));
    let south = vertices.len() - 1;
    let ring = |r: usize, s: usize| 1 + (r - 1) * segs + s % segs;
    let mut triangles = Vec::new();
    for s in 0..segs {
        triangles.push([0, ring(1, s), ring(1, s + 1)]);
        triangles.push([south, ring(rings - 1, s + 1), ring(rings - 1, s)]);
    }
    for r in 1..rings - 1 {
        for s in 0..segs {
            triangles.push([ring(r, s), ring(r + 1, s), ring(r + 1, s + 1)]);
            triangles.push([ring(r, s), ring(r + 1, s + 1), ring(r, s + 1)]);
        }
    }
    TriangleMesh { vertices, triangles, vertex_colors: None }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub object: ObjectSpec,
    pub flipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Gaussian noise on the measured range, mm.
    pub depth_sigma_mm: f64,
    /// Multiplicative depth bias `b`; the pipeline should recover `α = 1/b`.
    pub depth_bias: f64,
    pub pose_jitter_deg: f64,
    pub pose_jitter_mm: f64,
    pub dropout_probability: f64,
    pub corner_sigma_px: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            depth_sigma_mm: 0.0,
            depth_bias: 1.0,
            pose_jitter_deg: 0.0,
            pose_jitter_mm: 0.0,
            dropout_probability: 0.0,
            corner_sigma_px: 0.0,
            seed: 0,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.depth_bias > 0.0) {
            return Err(Error::InvalidConfig(format!("depth bias must be positive, got {}", self.depth_bias)));
        }
        if !(self.depth_sigma_mm >= 0.0 && self.pose_jitter_deg >= 0.0 && self.pose_jitter_mm >= 0.0 && self.corner_sigma_px >= 0.0) {
            return Err(Error::InvalidConfig("noise magnitudes must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout_probability) {
            return Err(Error::InvalidConfig("dropout probability must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Scene index used to derive the per-scene random stream.
pub fn scene_index(rig: &RigConfig, angle_index: usize, arm_index: usize, flipped: bool) -> usize {
    (flipped as usize) * rig.angles * rig.arm_positions.len() + arm_index * rig.angles + angle_index
}

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    pub depth: DepthMap,
    pub rgb: RgbImage,
    pub depth_corners: CorrespondenceSet,
    pub rgb_corners: CorrespondenceSet,
    /// Reference → camera, as actually captured (jitter included).
    pub depth_pose: RigidTransform,
    pub rgb_pose: RigidTransform,
}

/// What a camera ray sees first.
enum Surface {
    Object(Hit),
    Table(f64, Vec3),
}

struct World<'a> {
    rig: &'a RigConfig,
    object: &'a ObjectSpec,
    /// reference → object frame
    to_object: RigidTransform,
}

impl World<'_> {
    fn object_hit(&self, origin: &Vec3, dir: &Vec3) -> Option<Hit> {
        let o = self.to_object.apply_point(origin);
        let d = self.to_object.apply_vector(dir);
        self.object.shape.intersect(&o, &d)
    }

    fn cast(&self, origin: &Vec3, dir: &Vec3) -> Option<Surface> {
        let obj = self.object_hit(origin, dir);
        let table = (dir.z != 0.0)
            .then(|| -origin.z / dir.z)
            .filter(|&t| t > HIT_EPS)
            .map(|t| (t, origin + dir * t))
            .filter(|(_, p)| p.x * p.x + p.y * p.y <= self.rig.table_radius_mm.powi(2));
        match (obj, table) {
            (Some(h), Some((t, _))) if h.t <= t => Some(Surface::Object(h)),
            (Some(h), None) => Some(Surface::Object(h)),
            (_, Some((t, p))) => Some(Surface::Table(t, p)),
            (None, None) => None,
        }
    }

    fn camera_ray(pose: &RigidTransform, cam: &PinholeCamera, u: usize, v: usize) -> (Vec3, Vec3) {
        let inv = pose.inverse();
        (inv.translation, inv.apply_vector(&cam.ray(u as f64, v as f64)))
    }

    /// Exact z-depth per pixel; −1 where nothing is hit.
    fn render_depth(&self, pose: &RigidTransform, cam: &PinholeCamera) -> Vec<f64> {
        (0..cam.width * cam.height)
            .into_par_iter()
            .map(|k| {
                let (o, d) = Self::camera_ray(pose, cam, k % cam.width, k / cam.width);
                // d has unit z in the camera frame, so the ray parameter is the depth
                match self.cast(&o, &d) {
                    Some(Surface::Object(h)) => h.t,
                    Some(Surface::Table(t, _)) => t,
                    None => -1.0,
                }
            })
            .collect()
    }

    fn render_rgb(&self, pose: &RigidTransform, cam: &PinholeCamera) -> Vec<[u8; 3]> {
        let board = &self.rig.chessboard;
        (0..cam.width * cam.height)
            .into_par_iter()
            .map(|k| {
                let (o, d) = Self::camera_ray(pose, cam, k % cam.width, k / cam.width);
                match self.cast(&o, &d) {
                    Some(Surface::Object(h)) => self.object.texture.rgb_at(&h.point),
                    Some(Surface::Table(_, p)) => match board.shade(&p) {
                        Some(true) => [20, 20, 20],
                        Some(false) => [235, 235, 235],
                        None => [120, 110, 100],
                    },
                    None => [0, 0, 0],
                }
            })
            .collect()
    }

    /// Board corners visible from `pose`, projected exactly.
    fn corners(&self, pose: &RigidTransform, cam: &PinholeCamera, sigma_px: f64, rng: &mut ChaCha8Rng) -> Result<CorrespondenceSet> {
        let center = pose.inverse().translation;
        let mut object_points = Vec::new();
        let mut image_points = Vec::new();
        for x in self.rig.chessboard.corners() {
            let pc = pose.apply_point(&x);
            if pc.z <= 0.0 {
                continue;
            }
            let uv = cam.project(&pc)?;
            if !cam.contains(&uv) {
                continue;
            }
            let dir = x - center;
            if self.object_hit(&center, &dir).is_some_and(|h| h.t < 1.0 - 1e-9) {
                continue;
            }
            object_points.push(x);
            image_points.push(uv);
        }
        if sigma_px > 0.0 {
            let n = Normal::new(0.0, sigma_px).unwrap();
            for uv in &mut image_points {
                *uv += Vec2::new(n.sample(rng), n.sample(rng));
            }
        }
        CorrespondenceSet::new(object_points, image_points)
    }

    /// Object-only coverage at pixel centers.
    fn mask(&self, pose: &RigidTransform, cam: &PinholeCamera) -> Vec<bool> {
        (0..cam.width * cam.height)
            .into_par_iter()
            .map(|k| {
                let (o, d) = Self::camera_ray(pose, cam, k % cam.width, k / cam.width);
                self.object_hit(&o, &d).is_some()
            })
            .collect()
    }
}

fn jitter(rng: &mut ChaCha8Rng, deg: f64, mm: f64) -> RigidTransform {
    let n = Normal::new(0.0, 1.0).unwrap();
    let mut g = || n.sample(rng);
    let w = Vec3::new(g(), g(), g()) * (deg.to_radians() / 3f64.sqrt());
    let t = Vec3::new(g(), g(), g()) * (mm / 3f64.sqrt());
    RigidTransform::from_rotation_vector(w).with_translation(t)
}

pub fn render_scene(rig: &RigConfig, scene: &SceneDescription, angle_index: usize, arm_index: usize, noise: &NoiseModel) -> Result<RenderedScene> {
    rig.validate()?;
    scene.object.validate()?;
    noise.validate()?;
    let nominal = rig.depth_pose(angle_index, arm_index)?;
    let mut rng = scene_rng(noise.seed, scene_index(rig, angle_index, arm_index, scene.flipped));
    let depth_pose = if noise.pose_jitter_deg > 0.0 || noise.pose_jitter_mm > 0.0 {
        jitter(&mut rng, noise.pose_jitter_deg, noise.pose_jitter_mm).compose(&nominal)
    } else {
        nominal
    };
    let rgb_pose = rig.rgb_pose_from_depth(&depth_pose);
    let world = World { rig, object: &scene.object, to_object: scene.object.placement(scene.flipped).inverse() };

    let cam = &rig.depth_camera;
    let mut values = world.render_depth(&depth_pose, cam);
    // Noise is drawn sequentially so the stream does not depend on threading.
    let gauss = (noise.depth_sigma_mm > 0.0).then(|| Normal::new(0.0, noise.depth_sigma_mm).unwrap());
    for (k, z) in values.iter_mut().enumerate() {
        if *z <= 0.0 {
            continue;
        }
        if noise.dropout_probability > 0.0 && rng.random::<f64>() < noise.dropout_probability {
            *z = -1.0;
            continue;
        }
        if let Some(g) = &gauss {
            let range = *z * cam.ray((k % cam.width) as f64, (k / cam.width) as f64).norm();
            *z *= (range + g.sample(&mut rng)) / range;
        }
        *z *= noise.depth_bias;
        if *z <= 0.0 {
            *z = -1.0;
        }
    }
    let depth = DepthMap::new(cam.width, cam.height, values)?;
    let rgb = RgbImage { width: rig.rgb_camera.width, height: rig.rgb_camera.height, pixels: world.render_rgb(&rgb_pose, &rig.rgb_camera) };
    let depth_corners = world.corners(&depth_pose, cam, noise.corner_sigma_px, &mut rng)?;
    let rgb_corners = world.corners(&rgb_pose, &rig.rgb_camera, noise.corner_sigma_px, &mut rng)?;
    Ok(RenderedScene { depth, rgb, depth_corners, rgb_corners, depth_pose, rgb_pose })
}

/// Ground-truth silhouette of the object for one camera pose (pixel centers).
pub fn object_mask(rig: &RigConfig, object: &ObjectSpec, flipped: bool, pose: &RigidTransform, cam: &PinholeCamera) -> Vec<bool> {
    let world = World { rig, object, to_object: object.placement(flipped).inverse() };
    world.mask(pose, cam)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTruth {
    pub id: String,
    pub depth_pose: RigidTransform,
    pub rgb_pose: RigidTransform,
}

/// Sidecar written next to a simulated session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub alpha: f64,
    pub depth_bias: f64,
    /// RGB camera frame → depth camera frame.
    pub relative: RigidTransform,
    /// Maps the flipped placement back onto the upright one.
    pub registration: RigidTransform,
    pub object: ObjectSpec,
    pub dimensions_mm: Vec3,
    pub rig: RigConfig,
    pub noise: NoiseModel,
    pub scenes: Vec<SceneTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionOptions {
    pub include_flipped: bool,
    /// Height allowance above the object's measured height, mm.
    pub box_margin_mm: f64,
    /// Lower crop face above the table, mm.
    pub table_clearance_mm: f64,
}

impl Default for SessionOptions {
    fn default() -> Self {
        SessionOptions { include_flipped: true, box_margin_mm: 10.0, table_clearance_mm: 1.0 }
    }
}

pub const MANIFEST_NAME: &str = "session.json";
pub const GROUND_TRUTH_NAME: &str = "ground_truth.json";

/// Renders every angle × arm position × orientation and writes the session.
pub fn generate_session(rig: &RigConfig, object: &ObjectSpec, noise: &NoiseModel, out_dir: &Path, options: &SessionOptions) -> Result<CaptureSession> {
    rig.validate()?;
    object.validate()?;
    noise.validate()?;
    let mut grid = Vec::new();
    for flipped in if options.include_flipped { vec![false, true] } else { vec![false] } {
        for arm in 0..rig.arm_positions.len() {
            for angle in 0..rig.angles {
                grid.push((angle, arm, flipped));
            }
        }
    }
    let scenes_dir = out_dir.join("scenes");
    let results: Vec<(SceneRecord, SceneTruth)> = grid
        .par_iter()
        .map(|&(angle, arm, flipped)| -> Result<(SceneRecord, SceneTruth)> {
            let id = format!("{}_a{}_p{:02}", if flipped { "flip" } else { "up" }, arm, angle);
            let scene = SceneDescription { object: object.clone(), flipped };
            let r = render_scene(rig, &scene, angle, arm, noise)?;
            let rec = SceneRecord {
                id: id.clone(),
                angle_index: angle,
                arm_index: arm,
                flipped,
                depth: format!("scenes/{id}_depth.pfm").into(),
                rgb: format!("scenes/{id}_rgb.ppm").into(),
                depth_corners: format!("scenes/{id}_depth_corners.txt").into(),
                rgb_corners: format!("scenes/{id}_rgb_corners.txt").into(),
            };
            write_pfm(&scenes_dir.join(format!("{id}_depth.pfm")), &r.depth)?;
            write_ppm(&scenes_dir.join(format!("{id}_rgb.ppm")), &r.rgb)?;
            write_corners(&scenes_dir.join(format!("{id}_depth_corners.txt")), &r.depth_corners)?;
            write_corners(&scenes_dir.join(format!("{id}_rgb_corners.txt")), &r.rgb_corners)?;
            Ok((rec, SceneTruth { id, depth_pose: r.depth_pose, rgb_pose: r.rgb_pose }))
        })
        .collect::<Result<_>>()?;
    let (records, truths): (Vec<_>, Vec<_>) = results.into_iter().unzip();

    let corners = rig.chessboard.corners();
    let lo = corners.iter().fold(Vec3::repeat(f64::INFINITY), |m, c| m.inf(c));
    let hi = corners.iter().fold(Vec3::repeat(f64::NEG_INFINITY), |m, c| m.sup(c));
    let dims = object.dimensions();
    let bounding_box = Aabb::new(
        Vec3::new(lo.x, lo.y, options.table_clearance_mm),
        Vec3::new(hi.x, hi.y, dims.z + options.box_margin_mm),
    )?;
    let session = CaptureSession {
        version: MANIFEST_VERSION,
        depth_camera: rig.depth_camera,
        rgb_camera: rig.rgb_camera,
        angles: rig.angles,
        arm_positions: rig.arm_positions.len(),
        orientations: if options.include_flipped { 2 } else { 1 },
        bounding_box,
        reference_dims_mm: Some(dims),
        ground_truth: Some(GROUND_TRUTH_NAME.into()),
        output_dir: "out".into(),
        scenes: records,
        root: out_dir.to_path_buf(),
    };
    let truth = GroundTruth {
        alpha: 1.0 / noise.depth_bias,
        depth_bias: noise.depth_bias,
        relative: rig.relative,
        registration: object.flip_transform().inverse(),
        object: object.clone(),
        dimensions_mm: dims,
        rig: rig.clone(),
        noise: noise.clone(),
        scenes: truths,
    };
    write_json(&out_dir.join(GROUND_TRUTH_NAME), &truth)?;
    session.save(&out_dir.join(MANIFEST_NAME))?;
    Ok(session)
}

/// Per-scene pose pairs around a known relative extrinsic.
///
/// Inlier scenes get isotropic noise of the given RMS magnitude (rotation
/// vector and translation); outlier scenes get gross errors of fixed
/// magnitude, generated in opposite pairs.
pub fn synthetic_calibration_set(
    relative: &RigidTransform,
    inliers: usize,
    noise_deg: f64,
    noise_mm: f64,
    outliers: usize,
    outlier_deg: f64,
    outlier_mm: f64,
    seed: u64,
) -> (CalibrationSet, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = inliers + outliers;
    let mut outlier_flags = vec![false; total];
    // spread outliers through the sequence
    for k in 0..outliers {
        outlier_flags[(k * total) / outliers.max(1) + (total / outliers.max(1)) / 2] = true;
    }
    let mut set = CalibrationSet::default();
    let mut pending: Option<(Vec3, Vec3)> = None;
    for &is_outlier in &outlier_flags {
        let board = look_at(
            &Vec3::new(rng.random_range(-150.0..150.0), rng.random_range(-150.0..150.0), rng.random_range(250.0..500.0)),
            &Vec3::new(rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0), 0.0),
        );
        let err = if is_outlier {
            let (axis, dir) = match pending.take() {
                Some((a, d)) => (-a, -d),
                None => {
                    let a = Vec3::from(UnitSphere.sample(&mut rng));
                    let d = Vec3::from(UnitSphere.sample(&mut rng));
                    pending = Some((a, d));
                    (a, d)
                }
            };
            RigidTransform::from_rotation_vector(axis * outlier_deg.to_radians()).with_translation(dir * outlier_mm)
        } else {
            jitter(&mut rng, noise_deg, noise_mm)
        };
        set.rgb_poses.push(board);
        set.depth_poses.push(err.compose(relative).compose(&board));
    }
    (set, outlier_flags)
}
