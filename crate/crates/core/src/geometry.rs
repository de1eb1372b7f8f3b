//! Rigid transforms, pinhole cameras and the raster/cloud/mesh containers
//! shared by every stage. All lengths are millimeters; frames are
//! right-handed and cameras look down +Z.

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;
pub type Mat3 = Matrix3<f64>;

/// An SE(3) pose: `p ↦ rotation · p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self { rotation: Mat3::identity(), translation: t }
    }

    /// Rotation by `angle` radians about `axis` (need not be unit).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        Self { rotation: *rot.matrix(), translation: Vec3::zeros() }
    }

    /// Rotation from a rotation vector (axis × angle).
    pub fn from_rotation_vector(w: Vec3) -> Self {
        let rot = nalgebra::Rotation3::new(w);
        Self { rotation: *rot.matrix(), translation: Vec3::zeros() }
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_axis_angle(Vec3::x(), angle)
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(Vec3::z(), angle)
    }

    pub fn with_translation(mut self, t: Vec3) -> Self {
        self.translation = t;
        self
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    #[inline]
    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Rotation angle (radians) of this transform's rotation block.
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        // acos loses precision near 0; use the skew part there.
        let skew = Vec3::new(
            self.rotation[(2, 1)] - self.rotation[(1, 2)],
            self.rotation[(0, 2)] - self.rotation[(2, 0)],
            self.rotation[(1, 0)] - self.rotation[(0, 1)],
        );
        (0.5 * skew.norm()).atan2(c)
    }

    /// Rotation angle (rad) and translation distance (mm) between two poses.
    pub fn distance_to(&self, other: &RigidTransform) -> (f64, f64) {
        let delta = self.inverse().compose(other);
        (delta.rotation_angle(), (self.translation - other.translation).norm())
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major 4×4 array, the on-disk pose layout.
    pub fn to_rows(&self) -> [[f64; 4]; 4] {
        let m = self.to_matrix4();
        let mut rows = [[0.0; 4]; 4];
        for (r, row) in rows.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = m[(r, c)];
            }
        }
        rows
    }

    /// Reads a row-major 4×4 array without re-orthogonalizing.
    pub fn from_rows(rows: &[[f64; 4]; 4]) -> RigidTransform {
        let rotation = Mat3::from_fn(|r, c| rows[r][c]);
        let translation = Vec3::new(rows[0][3], rows[1][3], rows[2][3]);
        RigidTransform { rotation, translation }
    }

    /// Orthonormality and determinant residuals of the rotation block.
    pub fn se3_residual(&self) -> (f64, f64) {
        let ortho = (self.rotation.transpose() * self.rotation - Mat3::identity()).norm();
        let det = (self.rotation.determinant() - 1.0).abs();
        (ortho, det)
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let (o, d) = self.se3_residual();
        o <= tol && d <= tol && self.translation.iter().all(|v| v.is_finite())
    }
}

impl Serialize for RigidTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = <[[f64; 4]; 4]>::deserialize(d)?;
        Ok(RigidTransform::from_rows(&rows))
    }
}

/// Replaces the 3×3 block by its nearest rotation (polar decomposition with
/// determinant fix); the translation passes through unchanged.
pub fn project_to_se3(m: &Mat3, translation: &Vec3) -> Result<RigidTransform> {
    let svd = m.svd(true, true);
    let s = svd.singular_values;
    let smax = s.max();
    let smin = s.min();
    if !(smax > 0.0) || smin / smax < 1e-12 {
        return Err(Error::SingularMatrix(if smin > 0.0 { smax / smin } else { f64::INFINITY }));
    }
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let d = (u * vt).determinant().signum();
    let fix = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d));
    Ok(RigidTransform { rotation: u * fix * vt, translation: *translation })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl PinholeCamera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Self { fx, fy, cx, cy, width, height };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidInput(format!("focal lengths must be positive ({}, {})", self.fx, self.fy)));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::InvalidInput(format!(
                "principal point ({}, {}) outside {}x{} raster",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn project(&self, p: &Vec3) -> Result<Vec2> {
        if p.z <= 0.0 {
            return Err(Error::NonPositiveDepth(p.z));
        }
        Ok(Vec2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Unit-depth ray direction through pixel coordinates `(u, v)`.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn contains(&self, uv: &Vec2) -> bool {
        uv.x >= 0.0 && uv.y >= 0.0 && uv.x <= (self.width - 1) as f64 && uv.y <= (self.height - 1) as f64
    }

    pub fn backproject(&self, depth: &DepthMap) -> Result<PointCloud> {
        backproject(self, depth)
    }
}

pub fn project(cam: &PinholeCamera, p: &Vec3) -> Result<Vec2> {
    cam.project(p)
}

/// One point per valid pixel; pixel `(u, v)` is sampled at its integer coordinate.
pub fn backproject(cam: &PinholeCamera, depth: &DepthMap) -> Result<PointCloud> {
    if depth.width != cam.width || depth.height != cam.height {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", cam.width, cam.height),
            actual: format!("{}x{}", depth.width, depth.height),
        });
    }
    let mut positions = Vec::new();
    for v in 0..depth.height {
        for u in 0..depth.width {
            let z = depth.values[v * depth.width + u];
            if z > 0.0 {
                positions.push(cam.ray(u as f64, v as f64) * z);
            }
        }
    }
    Ok(PointCloud::from_positions(positions))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Vec3>,
    /// RGB in [0, 1].
    pub colors: Option<Vec<Vec3>>,
    pub normals: Option<Vec<Vec3>>,
}

impl PointCloud {
    pub fn from_positions(positions: Vec<Vec3>) -> Self {
        Self { positions, colors: None, normals: None }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        for (name, attr) in [("colors", &self.colors), ("normals", &self.normals)] {
            if let Some(a) = attr {
                if a.len() != n {
                    return Err(Error::DimensionMismatch { expected: format!("{n} {name}"), actual: a.len().to_string() });
                }
            }
        }
        if let Some(ns) = &self.normals {
            if let Some(bad) = ns.iter().position(|v| (v.norm() - 1.0).abs() > 1e-6) {
                return Err(Error::InvalidInput(format!("normal {bad} is not unit length")));
            }
        }
        Ok(())
    }

    /// Keeps the entries at `indices`, attributes stay aligned.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let pick = |v: &Vec<Vec3>| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        PointCloud {
            positions: pick(&self.positions),
            colors: self.colors.as_ref().map(pick),
            normals: self.normals.as_ref().map(pick),
        }
    }

    pub fn filter(&self, mut keep: impl FnMut(usize, &Vec3) -> bool) -> PointCloud {
        let idx: Vec<usize> = self.positions.iter().enumerate().filter(|(i, p)| keep(*i, p)).map(|(i, _)| i).collect();
        self.select(&idx)
    }

    /// Appends `other`; an attribute survives only if both clouds carry it.
    pub fn extend(&mut self, other: &PointCloud) {
        let was_empty = self.is_empty();
        self.positions.extend_from_slice(&other.positions);
        merge_attr(&mut self.colors, &other.colors, was_empty);
        merge_attr(&mut self.normals, &other.normals, was_empty);
    }

    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        transform_points(t, self)
    }

    pub fn aabb(&self) -> Option<(Vec3, Vec3)> {
        bounds(&self.positions)
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.is_empty() {
            return None;
        }
        Some(self.positions.iter().sum::<Vec3>() / self.len() as f64)
    }
}

fn merge_attr(dst: &mut Option<Vec<Vec3>>, src: &Option<Vec<Vec3>>, dst_was_empty: bool) {
    match (dst.as_mut(), src) {
        (Some(d), Some(s)) => d.extend_from_slice(s),
        (None, Some(s)) if dst_was_empty => *dst = Some(s.clone()),
        _ => *dst = None,
    }
}

pub fn bounds(points: &[Vec3]) -> Option<(Vec3, Vec3)> {
    let first = points.first()?;
    Some(points.iter().fold((*first, *first), |(lo, hi), p| (lo.inf(p), hi.sup(p))))
}

/// Positions map by `R·p + t`, normals by `R`, colors pass through.
pub fn transform_points(t: &RigidTransform, pts: &PointCloud) -> PointCloud {
    PointCloud {
        positions: pts.positions.iter().map(|p| t.apply_point(p)).collect(),
        colors: pts.colors.clone(),
        normals: pts.normals.as_ref().map(|ns| ns.iter().map(|n| t.apply_vector(n)).collect()),
    }
}

/// Dense depth raster in mm, row-major; values `<= 0` are invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: format!("{} values", width * height),
                actual: values.len().to_string(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("depth map contains non-finite values".into()));
        }
        Ok(Self { width, height, values })
    }

    pub fn invalid(width: usize, height: usize) -> Self {
        Self { width, height, values: vec![-1.0; width * height] }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.values[v * self.width + u]
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.0).count()
    }
}

/// 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, pixels: vec![[0; 3]; width * height] }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self { width, height, pixels: vec![rgb; width * height] }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> [u8; 3] {
        self.pixels[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, rgb: [u8; 3]) {
        self.pixels[v * self.width + u] = rgb;
    }

    /// Bilinear lookup at continuous pixel coordinates, RGB in [0, 1].
    /// `None` outside the pixel-center lattice.
    pub fn sample_bilinear(&self, uv: &Vec2) -> Option<Vec3> {
        if !(uv.x >= 0.0 && uv.y >= 0.0 && uv.x <= (self.width - 1) as f64 && uv.y <= (self.height - 1) as f64) {
            return None;
        }
        let u0 = (uv.x.floor() as usize).min(self.width.saturating_sub(2));
        let v0 = (uv.y.floor() as usize).min(self.height.saturating_sub(2));
        let fu = uv.x - u0 as f64;
        let fv = uv.y - v0 as f64;
        let px = |u: usize, v: usize| {
            let c = self.get(u.min(self.width - 1), v.min(self.height - 1));
            Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64) / 255.0
        };
        let top = px(u0, v0) * (1.0 - fu) + px(u0 + 1, v0) * fu;
        let bottom = px(u0, v0 + 1) * (1.0 - fu) + px(u0 + 1, v0 + 1) * fu;
        Some(top * (1.0 - fv) + bottom * fv)
    }

    /// Color of the pixel whose center is closest to `uv`, RGB in [0, 1].
    pub fn sample_nearest(&self, uv: &Vec2) -> Option<Vec3> {
        let (u, v) = (uv.x.round(), uv.y.round());
        if !(u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64) {
            return None;
        }
        let c = self.get(u as usize, v as usize);
        Some(Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64) / 255.0)
    }
}

pub fn color_to_u8(c: &Vec3) -> [u8; 3] {
    let q = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    [q(c.x), q(c.y), q(c.z)]
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub vertex_colors: Option<Vec<Vec3>>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let mesh = Self { vertices, triangles, vertex_colors: None };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (i, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&k| k >= n) {
                return Err(Error::InvalidInput(format!("triangle {i} references a vertex out of range")));
            }
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(Error::InvalidInput(format!("triangle {i} is degenerate")));
            }
        }
        if let Some(c) = &self.vertex_colors {
            if c.len() != n {
                return Err(Error::DimensionMismatch { expected: format!("{n} colors"), actual: c.len().to_string() });
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn aabb(&self) -> Option<(Vec3, Vec3)> {
        bounds(&self.vertices)
    }

    /// Area-weighted vertex normals; isolated vertices get a zero vector.
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut acc = vec![Vec3::zeros(); self.vertices.len()];
        for t in &self.triangles {
            let [a, b, c] = t.map(|i| self.vertices[i]);
            let n = (b - a).cross(&(c - a));
            for &i in t {
                acc[i] += n;
            }
        }
        acc.into_iter().map(|n| n.try_normalize(1e-300).unwrap_or_else(Vec3::zeros)).collect()
    }

    pub fn reverse_orientation(&mut self) {
        for t in &mut self.triangles {
            t.swap(1, 2);
        }
    }

    pub fn transformed(&self, t: &RigidTransform) -> TriangleMesh {
        TriangleMesh {
            vertices: self.vertices.iter().map(|p| t.apply_point(p)).collect(),
            triangles: self.triangles.clone(),
            vertex_colors: self.vertex_colors.clone(),
        }
    }

    /// Count of undirected edges and how many triangles use each one.
    fn edge_uses(&self) -> std::collections::HashMap<(usize, usize), usize> {
        let mut edges = std::collections::HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        edges
    }

    /// Every edge shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        !self.triangles.is_empty() && self.edge_uses().values().all(|&c| c == 2)
    }

    /// V − E + F over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &i in t {
                used[i] = true;
            }
        }
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - self.edge_uses().len() as i64 + self.triangles.len() as i64
    }

    /// Keeps the connected component (by shared vertices) with the most triangles.
    pub fn largest_component(&self) -> TriangleMesh {
        if self.triangles.is_empty() {
            return self.clone();
        }
        let n = self.vertices.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for t in &self.triangles {
            let a = find(&mut parent, t[0]);
            for &k in &t[1..] {
                let b = find(&mut parent, k);
                if a != b {
                    parent[b] = a;
                }
            }
        }
        let mut counts = std::collections::HashMap::new();
        for t in &self.triangles {
            *counts.entry(find(&mut parent, t[0])).or_insert(0usize) += 1;
        }
        // Ties broken by smallest root index for determinism.
        let best = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(r, _)| *r).unwrap();
        let tris: Vec<[usize; 3]> =
            self.triangles.iter().filter(|t| find(&mut parent, t[0]) == best).copied().collect();
        self.compact(tris)
    }

    fn compact(&self, tris: Vec<[usize; 3]>) -> TriangleMesh {
        let mut remap = vec![usize::MAX; self.vertices.len()];
        let mut vertices = Vec::new();
        let mut colors = self.vertex_colors.as_ref().map(|_| Vec::new());
        let triangles = tris
            .into_iter()
            .map(|t| {
                t.map(|i| {
                    if remap[i] == usize::MAX {
                        remap[i] = vertices.len();
                        vertices.push(self.vertices[i]);
                        if let (Some(dst), Some(src)) = (colors.as_mut(), self.vertex_colors.as_ref()) {
                            dst.push(src[i]);
                        }
                    }
                    remap[i]
                })
            })
            .collect();
        TriangleMesh { vertices, triangles, vertex_colors: colors }
    }
}

/// Plane `{x : normal·x + offset = 0}` with a unit normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: Vec3,
    pub offset: f64,
}

impl Plane {
    pub fn new(normal: Vec3, offset: f64) -> Result<Self> {
        let len = normal.norm();
        if !(len > 0.0) {
            return Err(Error::InvalidInput("plane normal is zero".into()));
        }
        Ok(Self { normal: normal / len, offset: offset / len })
    }

    pub fn through(point: &Vec3, normal: &Vec3) -> Result<Self> {
        let n = normal.try_normalize(1e-300).ok_or_else(|| Error::InvalidInput("plane normal is zero".into()))?;
        Ok(Self { normal: n, offset: -n.dot(point) })
    }

    #[inline]
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) + self.offset
    }

    pub fn flipped(&self) -> Self {
        Self { normal: -self.normal, offset: -self.offset }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn close(a: &Mat3, b: &Mat3, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn nearest_and_bilinear_sampling() {
        let mut img = RgbImage::new(2, 1);
        img.set(1, 0, [255, 255, 255]);
        assert_eq!(img.sample_nearest(&Vec2::new(0.4, 0.0)), Some(Vec3::zeros()));
        assert_eq!(img.sample_nearest(&Vec2::new(0.6, 0.2)), Some(Vec3::repeat(1.0)));
        assert_eq!(img.sample_nearest(&Vec2::new(1.6, 0.0)), None);
        assert!((img.sample_bilinear(&Vec2::new(0.25, 0.0)).unwrap() - Vec3::repeat(0.25)).norm() < 1e-12);
    }

    #[test]
    fn compose_identity_and_inverse() {
        let i = RigidTransform::identity();
        assert_eq!(i.compose(&i), i);
        let t = RigidTransform::rot_z(0.3).with_translation(Vec3::new(1.0, -2.0, 7.0));
        let e = t.compose(&t.inverse());
        assert!(close(&e.rotation, &Mat3::identity(), 1e-12));
        assert!(e.translation.norm() < 1e-12);
    }

    #[test]
    fn compose_rz90_twice_is_rz180() {
        // direct matrix product oracle
        let rz90 = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let expect = rz90 * rz90;
        assert!(close(&expect, &Mat3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0), 0.0));
        let r = RigidTransform::rot_z(PI / 2.0);
        assert!(close(&r.compose(&r).rotation, &expect, 1e-12));
    }

    #[test]
    fn invert_pure_translation() {
        let t = RigidTransform::from_translation(Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(t.inverse().translation, Vec3::new(-1.0, -2.0, -3.0));
        assert_eq!(RigidTransform::identity().inverse(), RigidTransform::identity());
        let t = RigidTransform::rot_z(PI / 6.0).with_translation(Vec3::new(4.0, 5.0, 6.0));
        let e = t.compose(&t.inverse());
        assert!(close(&e.rotation, &Mat3::identity(), 1e-12) && e.translation.norm() < 1e-12);
    }

    #[test]
    fn transform_points_examples() {
        let cloud = PointCloud::from_positions(vec![Vec3::zeros()]);
        let moved = transform_points(&RigidTransform::from_translation(Vec3::new(0.0, 0.0, 5.0)), &cloud);
        assert_eq!(moved.positions[0], Vec3::new(0.0, 0.0, 5.0));
        let mut c = PointCloud::from_positions(vec![Vec3::new(1.0, 0.0, 0.0)]);
        c.normals = Some(vec![Vec3::new(1.0, 0.0, 0.0)]);
        c.colors = Some(vec![Vec3::new(0.2, 0.4, 0.6)]);
        let r = transform_points(&RigidTransform::rot_z(PI / 2.0).with_translation(Vec3::new(0.0, 0.0, 9.0)), &c);
        assert!((r.positions[0] - Vec3::new(0.0, 1.0, 9.0)).norm() < 1e-12);
        assert!((r.normals.as_ref().unwrap()[0] - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
        assert_eq!(r.colors, c.colors);
        assert_eq!(transform_points(&RigidTransform::identity(), &c), c);
    }

    #[test]
    fn project_examples() {
        let cam = PinholeCamera::new(1000.0, 1000.0, 500.0, 500.0, 1000, 1000).unwrap();
        assert_eq!(cam.project(&Vec3::new(0.0, 0.0, 42.0)).unwrap(), Vec2::new(500.0, 500.0));
        assert_eq!(cam.project(&Vec3::new(10.0, 0.0, 1000.0)).unwrap(), Vec2::new(510.0, 500.0));
        assert!(matches!(cam.project(&Vec3::new(1.0, 1.0, 0.0)), Err(Error::NonPositiveDepth(_))));
    }

    #[test]
    fn backproject_examples() {
        let cam = PinholeCamera::new(100.0, 100.0, 2.0, 1.0, 5, 3).unwrap();
        assert!(backproject(&cam, &DepthMap::invalid(5, 3)).unwrap().is_empty());
        let mut d = DepthMap::invalid(5, 3);
        d.values[5 + 2] = 100.0;
        let c = backproject(&cam, &d).unwrap();
        assert_eq!(c.positions, vec![Vec3::new(0.0, 0.0, 100.0)]);
        assert!(matches!(backproject(&cam, &DepthMap::invalid(4, 3)), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn project_backproject_roundtrip() {
        let cam = PinholeCamera::new(812.5, 790.0, 33.3, 21.7, 64, 48).unwrap();
        let values: Vec<f64> = (0..64 * 48).map(|i| 200.0 + (i % 17) as f64 * 13.7).collect();
        let d = DepthMap::new(64, 48, values).unwrap();
        let c = backproject(&cam, &d).unwrap();
        for (i, p) in c.positions.iter().enumerate() {
            let uv = cam.project(p).unwrap();
            assert!((uv - Vec2::new((i % 64) as f64, (i / 64) as f64)).norm() < 1e-9);
        }
    }

    #[test]
    fn se3_projection_examples() {
        let r = RigidTransform::rot_z(PI / 4.0);
        let p = project_to_se3(&r.rotation, &Vec3::new(1.0, 2.0, 3.0)).unwrap();
        assert!(close(&p.rotation, &r.rotation, 1e-12));
        assert_eq!(p.translation, Vec3::new(1.0, 2.0, 3.0));
        // SVD oracle: 1.01·R has singular values all 1.01 and identical singular vectors.
        let p = project_to_se3(&(r.rotation * 1.01), &Vec3::zeros()).unwrap();
        assert!(close(&p.rotation, &r.rotation, 1e-12));
        let rank2 = Mat3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0);
        assert!(matches!(project_to_se3(&rank2, &Vec3::zeros()), Err(Error::SingularMatrix(_))));
    }

    #[test]
    fn mesh_topology_helpers() {
        // tetrahedron
        let v = vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()];
        let m = TriangleMesh::new(v, vec![[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]]).unwrap();
        assert!(m.is_watertight());
        assert_eq!(m.euler_characteristic(), 2);
        assert!(TriangleMesh::new(vec![Vec3::zeros(); 3], vec![[0, 0, 1]]).is_err());
        assert!(TriangleMesh::new(vec![Vec3::zeros(); 3], vec![[0, 1, 3]]).is_err());
    }

    #[test]
    fn pose_rows_roundtrip() {
        let t = RigidTransform::rot_x(0.7).with_translation(Vec3::new(1.5, -2.0, 3.25));
        assert_eq!(RigidTransform::from_rows(&t.to_rows()), t);
    }

    fn arb_pose() -> impl Strategy<Value = RigidTransform> {
        (prop::array::uniform3(-3.0f64..3.0), prop::array::uniform3(-500.0f64..500.0)).prop_map(|(w, t)| {
            RigidTransform::from_rotation_vector(Vec3::from(w)).with_translation(Vec3::from(t))
        })
    }

    proptest! {
        #[test]
        fn compose_is_associative(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!((l.rotation - r.rotation).norm() < 1e-12);
            prop_assert!((l.translation - r.translation).norm() < 1e-12 * 1e3);
            prop_assert!(l.is_valid(1e-9));
        }

        #[test]
        fn transform_is_rigid(t in arb_pose(), pts in prop::collection::vec(prop::array::uniform3(-100.0f64..100.0), 2..20)) {
            let cloud = PointCloud::from_positions(pts.into_iter().map(Vec3::from).collect());
            let moved = transform_points(&t, &cloud);
            for i in 0..cloud.len() {
                for j in 0..cloud.len() {
                    let d0 = (cloud.positions[i] - cloud.positions[j]).norm();
                    let d1 = (moved.positions[i] - moved.positions[j]).norm();
                    prop_assert!((d0 - d1).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn se3_projection_restores_invariants(t in arb_pose(), noise in prop::array::uniform9(-0.1f64..0.1)) {
            let m = t.rotation + Mat3::from_row_slice(&noise);
            let p = project_to_se3(&m, &t.translation).unwrap();
            prop_assert!(p.is_valid(1e-9));
        }
    }
}
