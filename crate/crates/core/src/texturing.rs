//! Vertex re-coloring from the RGB views.
//!
//! Visibility per view comes from hidden point removal: points are spherically
//! flipped about the camera center and the ones landing on the convex hull
//! are the ones the camera sees.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PinholeCamera, PointCloud, RgbImage, RigidTransform, TriangleMesh, Vec2, Vec3};
use crate::hull::hull_vertex_indices;
use crate::registry::{Named, Registry};

pub const DEFAULT_RADIUS_FACTOR: f64 = 100.0;
/// Color given to vertices of an uncolored mesh that no view sees.
pub const FALLBACK_COLOR: [f64; 3] = [0.5, 0.5, 0.5];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisibilityMask {
    pub flags: Vec<bool>,
}

impl VisibilityMask {
    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn visible_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

pub fn hidden_point_removal(pts: &PointCloud, viewpoint: &Vec3, radius_factor: f64) -> Result<VisibilityMask> {
    visible_from(&pts.positions, viewpoint, radius_factor)
}

/// Hidden point removal over bare positions.
pub fn visible_from(positions: &[Vec3], viewpoint: &Vec3, radius_factor: f64) -> Result<VisibilityMask> {
    if positions.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if !(radius_factor >= 1.0) {
        return Err(Error::InvalidInput(format!("radius factor must be at least 1, got {radius_factor}")));
    }
    let local: Vec<Vec3> = positions.iter().map(|p| p - viewpoint).collect();
    let max_norm = local.iter().map(|p| p.norm()).fold(0.0, f64::max);
    let radius = radius_factor * max_norm;
    let mut flipped: Vec<Vec3> = local
        .iter()
        .map(|p| {
            let n = p.norm();
            if n > 0.0 {
                p + p * (2.0 * (radius - n) / n)
            } else {
                *p
            }
        })
        .collect();
    flipped.push(Vec3::zeros());
    let mut flags = vec![false; positions.len()];
    for i in hull_vertex_indices(&flipped) {
        if i < positions.len() {
            flags[i] = true;
        }
    }
    // A point sitting on the viewpoint is trivially seen.
    for (f, p) in flags.iter_mut().zip(&local) {
        *f |= p.norm() == 0.0;
    }
    Ok(VisibilityMask { flags })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorSample {
    pub color: Vec3,
    pub weight: f64,
}

/// Combines one vertex's samples from the views that see it.
pub trait ColorBlend: Named + Send + Sync {
    /// `samples` arrive sorted by descending weight, then color, so the result
    /// does not depend on view order. `None` leaves the prior color.
    fn combine(&self, samples: &[ColorSample]) -> Option<Vec3>;
}

/// Weighted mean of all views.
pub struct WeightedBlend;
/// Color from the single most frontal view.
pub struct BestView;

impl Named for WeightedBlend {
    fn name(&self) -> &'static str {
        "blend"
    }
}

impl ColorBlend for WeightedBlend {
    fn combine(&self, samples: &[ColorSample]) -> Option<Vec3> {
        let total: f64 = samples.iter().map(|s| s.weight).sum();
        (total > 0.0).then(|| samples.iter().map(|s| s.color * s.weight).sum::<Vec3>() / total)
    }
}

impl Named for BestView {
    fn name(&self) -> &'static str {
        "best_view"
    }
}

impl ColorBlend for BestView {
    fn combine(&self, samples: &[ColorSample]) -> Option<Vec3> {
        samples.first().filter(|s| s.weight > 0.0).map(|s| s.color)
    }
}

pub fn color_blenders() -> Registry<dyn ColorBlend> {
    Registry::<dyn ColorBlend>::new("color blend").with(Arc::new(WeightedBlend)).with(Arc::new(BestView))
}

/// One RGB view; `pose` maps reference coordinates into the camera frame.
#[derive(Debug, Clone, Copy)]
pub struct RedyeView<'a> {
    pub image: &'a RgbImage,
    pub camera: &'a PinholeCamera,
    pub pose: RigidTransform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RedyeParams {
    pub radius_factor: f64,
    pub strategy: String,
    pub sampling: PixelSampling,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelSampling {
    #[default]
    Nearest,
    Bilinear,
}

impl PixelSampling {
    fn sample(self, image: &RgbImage, uv: &Vec2) -> Option<Vec3> {
        match self {
            PixelSampling::Nearest => image.sample_nearest(uv),
            PixelSampling::Bilinear => image.sample_bilinear(uv),
        }
    }
}

impl Default for RedyeParams {
    fn default() -> Self {
        Self { radius_factor: DEFAULT_RADIUS_FACTOR, strategy: "blend".into(), sampling: PixelSampling::default() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RedyeReport {
    pub visible_per_view: Vec<usize>,
    /// Vertices that kept their prior color.
    pub uncolored: Vec<usize>,
}

pub fn redye_mesh(mesh: &TriangleMesh, views: &[RedyeView<'_>], params: &RedyeParams) -> Result<(TriangleMesh, RedyeReport)> {
    redye_mesh_with(mesh, views, params.radius_factor, params.sampling, color_blenders().get(&params.strategy)?.as_ref())
}

pub fn redye_mesh_with(
    mesh: &TriangleMesh,
    views: &[RedyeView<'_>],
    radius_factor: f64,
    sampling: PixelSampling,
    blend: &dyn ColorBlend,
) -> Result<(TriangleMesh, RedyeReport)> {
    if views.is_empty() {
        return Err(Error::NoScenes);
    }
    if mesh.vertices.is_empty() {
        return Err(Error::EmptyInput);
    }
    mesh.validate()?;
    let normals = mesh.vertex_normals();
    let per_view: Vec<Vec<(usize, ColorSample)>> = views
        .par_iter()
        .map(|view| -> Result<Vec<(usize, ColorSample)>> {
            let cam_points: Vec<Vec3> = mesh.vertices.iter().map(|p| view.pose.apply_point(p)).collect();
            let mask = visible_from(&cam_points, &Vec3::zeros(), radius_factor)?;
            let mut out = Vec::new();
            for (i, p) in cam_points.iter().enumerate() {
                if !mask.flags[i] || p.z <= 0.0 {
                    continue;
                }
                let Ok(uv) = view.camera.project(p) else { continue };
                let Some(color) = sampling.sample(view.image, &uv) else { continue };
                let n = view.pose.apply_vector(&normals[i]);
                let to_cam = -p.normalize();
                let weight = n.dot(&to_cam).max(0.0).powi(2);
                out.push((i, ColorSample { color, weight }));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut samples: Vec<Vec<ColorSample>> = vec![Vec::new(); mesh.vertices.len()];
    let mut report = RedyeReport { visible_per_view: Vec::with_capacity(views.len()), uncolored: Vec::new() };
    for list in per_view {
        report.visible_per_view.push(list.len());
        for (i, s) in list {
            samples[i].push(s);
        }
    }
    let prior = mesh.vertex_colors.clone().unwrap_or_else(|| vec![Vec3::from(FALLBACK_COLOR); mesh.vertices.len()]);
    let colors: Vec<Option<Vec3>> = samples
        .into_par_iter()
        .map(|mut s| {
            s.sort_by(|a, b| {
                b.weight.total_cmp(&a.weight).then_with(|| {
                    (0..3).map(|k| a.color[k].total_cmp(&b.color[k])).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
                })
            });
            blend.combine(&s)
        })
        .collect();
    let mut out = prior;
    for (i, c) in colors.into_iter().enumerate() {
        match c {
            Some(c) => out[i] = c,
            None => report.uncolored.push(i),
        }
    }
    let mut result = mesh.clone();
    result.vertex_colors = Some(out);
    Ok((result, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn fibonacci_sphere(n: usize, r: f64) -> Vec<Vec3> {
        let golden = PI * (3.0 - 5f64.sqrt());
        (0..n)
            .map(|i| {
                let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let s = (1.0 - y * y).sqrt();
                let th = golden * i as f64;
                Vec3::new(s * th.cos(), y, s * th.sin()) * r
            })
            .collect()
    }

    /// Fraction of the analytically visible cap marked visible, and of the far
    /// hemisphere falsely marked visible.
    fn sphere_rates(factor: f64, distance: f64) -> (f64, f64) {
        let r = 10.0;
        let pts = fibonacci_sphere(20_000, r);
        let eye = Vec3::new(0.0, 0.0, distance);
        let mask = visible_from(&pts, &eye, factor).unwrap();
        let cap = r / distance;
        let (mut near, mut near_vis, mut far, mut far_vis) = (0, 0, 0, 0);
        for (p, &v) in pts.iter().zip(&mask.flags) {
            let c = p.z / r;
            if c > cap {
                near += 1;
                near_vis += v as usize;
            } else if c < 0.0 {
                far += 1;
                far_vis += v as usize;
            }
        }
        (near_vis as f64 / near as f64, far_vis as f64 / far as f64)
    }

    #[test]
    fn sphere_visibility() {
        let (near, far) = sphere_rates(100.0, 40.0);
        assert!(near >= 0.99, "near {near}");
        assert!(far <= 0.01, "far {far}");
        let (near_big, _) = sphere_rates(1000.0, 40.0);
        assert!(near_big >= 0.999, "near {near_big}");
        let (near_small, _) = sphere_rates(10.0, 40.0);
        assert!(near_small <= near + 0.01 && near <= near_big + 0.01);
    }

    #[test]
    fn trivial_visibility_cases() {
        let one = visible_from(&[Vec3::new(1.0, 2.0, 3.0)], &Vec3::zeros(), 100.0).unwrap();
        assert_eq!(one.flags, vec![true]);
        let pair = visible_from(&[Vec3::new(0.0, 0.0, 20.0), Vec3::new(0.0, 0.0, 10.0)], &Vec3::zeros(), 100.0).unwrap();
        assert_eq!(pair.flags, vec![false, true]);
        assert!(matches!(visible_from(&[], &Vec3::zeros(), 100.0), Err(Error::EmptyCloud)));
        assert!(visible_from(&[Vec3::x()], &Vec3::zeros(), 0.5).is_err());
    }

    fn plane_mesh(z: f64) -> TriangleMesh {
        let mut vertices = Vec::new();
        let n = 10;
        for i in 0..=n {
            for j in 0..=n {
                vertices.push(Vec3::new(i as f64 * 4.0 - 20.0, j as f64 * 4.0 - 20.0, z));
            }
        }
        let mut triangles = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let a = i * (n + 1) + j;
                // wound to face -z, toward a camera at the origin
                triangles.push([a, a + 1, a + n + 1]);
                triangles.push([a + 1, a + n + 2, a + n + 1]);
            }
        }
        TriangleMesh::new(vertices, triangles).unwrap()
    }

    #[test]
    fn constant_image_plane() {
        let mesh = plane_mesh(100.0);
        let cam = PinholeCamera::new(300.0, 300.0, 160.0, 120.0, 320, 240).unwrap();
        let img = RgbImage::filled(320, 240, [200, 30, 90]);
        let view = RedyeView { image: &img, camera: &cam, pose: RigidTransform::identity() };
        let (colored, report) = redye_mesh(&mesh, &[view], &RedyeParams::default()).unwrap();
        assert!(report.uncolored.is_empty());
        let expect = Vec3::new(200.0, 30.0, 90.0) / 255.0;
        assert!(colored.vertex_colors.unwrap().iter().all(|c| (c - expect).norm() < 1e-12));
    }

    #[test]
    fn unseen_vertices_keep_prior_color() {
        let mut mesh = plane_mesh(100.0);
        let prior = Vec3::new(0.1, 0.2, 0.3);
        mesh.vertex_colors = Some(vec![prior; mesh.vertices.len()]);
        let cam = PinholeCamera::new(300.0, 300.0, 160.0, 120.0, 320, 240).unwrap();
        let img = RgbImage::filled(320, 240, [0, 0, 0]);
        // camera behind the plane, looking away
        let pose = RigidTransform::rot_x(PI).with_translation(Vec3::new(0.0, 0.0, 0.0));
        let view = RedyeView { image: &img, camera: &cam, pose };
        let (colored, report) = redye_mesh(&mesh, &[view], &RedyeParams::default()).unwrap();
        assert_eq!(report.uncolored.len(), mesh.vertices.len());
        assert!(colored.vertex_colors.unwrap().iter().all(|c| *c == prior));
        assert!(matches!(redye_mesh(&mesh, &[], &RedyeParams::default()), Err(Error::NoScenes)));
        let bad = RedyeParams { strategy: "median".into(), ..RedyeParams::default() };
        assert!(matches!(redye_mesh(&mesh, &[view], &bad), Err(Error::UnknownStrategy { .. })));
    }

    #[test]
    fn view_order_does_not_matter() {
        let mesh = plane_mesh(100.0);
        let cam = PinholeCamera::new(300.0, 300.0, 160.0, 120.0, 320, 240).unwrap();
        let mut images = Vec::new();
        for s in 0..4u8 {
            let mut img = RgbImage::new(320, 240);
            for v in 0..240 {
                for u in 0..320 {
                    img.set(u, v, [(u as u8).wrapping_mul(s + 1), (v as u8) ^ (s * 37), 17 * s]);
                }
            }
            images.push(img);
        }
        let poses: Vec<RigidTransform> = (0..4)
            .map(|s| RigidTransform::from_rotation_vector(Vec3::new(0.05 * s as f64, -0.03 * s as f64, 0.1)).with_translation(Vec3::new(s as f64, 0.0, 5.0)))
            .collect();
        let views: Vec<RedyeView> = (0..4).map(|s| RedyeView { image: &images[s], camera: &cam, pose: poses[s] }).collect();
        let reversed: Vec<RedyeView> = views.iter().rev().copied().collect();
        for strategy in ["blend", "best_view"] {
            let params = RedyeParams { strategy: strategy.into(), ..RedyeParams::default() };
            let a = redye_mesh(&mesh, &views, &params).unwrap().0;
            let b = redye_mesh(&mesh, &reversed, &params).unwrap().0;
            assert_eq!(a.vertex_colors, b.vertex_colors);
        }
    }
}
