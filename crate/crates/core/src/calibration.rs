//! Planar-target pose estimation, robust RGB↔depth relative extrinsics and
//! depth-scale equalization against the chessboard plane.

use nalgebra::{SMatrix, SVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project_to_se3, DepthMap, Mat3, PinholeCamera, Plane, PointCloud, RigidTransform, Vec2, Vec3};

pub const DEFAULT_RANSAC_THRESHOLD_MM: f64 = 0.5;
pub const DEFAULT_RANSAC_ITERATIONS: usize = 1000;

/// Chessboard corners on the target plane (`z = 0`) and their pixel observations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorrespondenceSet {
    pub object_points: Vec<Vec3>,
    pub image_points: Vec<Vec2>,
}

impl CorrespondenceSet {
    pub fn new(object_points: Vec<Vec3>, image_points: Vec<Vec2>) -> Result<Self> {
        let set = Self { object_points, image_points };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.object_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.object_points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.object_points.len() != self.image_points.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} image points", self.object_points.len()),
                actual: self.image_points.len().to_string(),
            });
        }
        if let Some(p) = self.object_points.iter().find(|p| p.z != 0.0) {
            return Err(Error::InvalidInput(format!("object point {p:?} is off the target plane")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct CalibrationSet {
    /// Γ_rgb: reference → RGB camera, one per scene.
    pub rgb_poses: Vec<RigidTransform>,
    /// Γ_depth: reference → depth camera, index-aligned with `rgb_poses`.
    pub depth_poses: Vec<RigidTransform>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleEstimate {
    pub per_scene: Vec<f64>,
    pub global: f64,
}

/// Target → camera pose from planar correspondences: normalized-DLT
/// homography, decomposition with the intrinsics, then Gauss–Newton on the
/// reprojection error.
pub fn estimate_pose_pnp(cam: &PinholeCamera, corr: &CorrespondenceSet) -> Result<RigidTransform> {
    corr.validate()?;
    let n = corr.len();
    if n < 4 {
        return Err(Error::DegenerateConfiguration(format!("{n} correspondences, need at least 4")));
    }
    check_not_collinear(&corr.object_points)?;

    let obj: Vec<Vec2> = corr.object_points.iter().map(|p| Vec2::new(p.x, p.y)).collect();
    let img: Vec<Vec2> = corr.image_points.iter().map(|uv| Vec2::new((uv.x - cam.cx) / cam.fx, (uv.y - cam.cy) / cam.fy)).collect();
    let h = homography_dlt(&obj, &img)?;
    let init = decompose_homography(&h, &corr.object_points)?;
    Ok(refine_pose(cam, corr, init))
}

fn check_not_collinear(points: &[Vec3]) -> Result<()> {
    let n = points.len() as f64;
    let c = points.iter().sum::<Vec3>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let d = p - c;
        sxx += d.x * d.x;
        sxy += d.x * d.y;
        syy += d.y * d.y;
    }
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
    let (lmax, lmin) = (0.5 * tr + disc, 0.5 * tr - disc);
    if !(lmax > 0.0) || lmin / lmax < 1e-12 {
        return Err(Error::DegenerateConfiguration("object points are collinear".into()));
    }
    Ok(())
}

/// Hartley normalization: centroid to origin, mean distance √2.
fn normalizer(points: &[Vec2]) -> Mat3 {
    let n = points.len() as f64;
    let c = points.iter().sum::<Vec2>() / n;
    let mean = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if mean > 0.0 { std::f64::consts::SQRT_2 / mean } else { 1.0 };
    Mat3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

fn homography_dlt(src: &[Vec2], dst: &[Vec2]) -> Result<Mat3> {
    let ns = normalizer(src);
    let nd = normalizer(dst);
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for (s, d) in src.iter().zip(dst) {
        let s = ns * Vec3::new(s.x, s.y, 1.0);
        let d = nd * Vec3::new(d.x, d.y, 1.0);
        let (x, y) = (s.x / s.z, s.y / s.z);
        let (u, v) = (d.x / d.z, d.y / d.z);
        let r1 = SVector::<f64, 9>::from_column_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
        let r2 = SVector::<f64, 9>::from_column_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
        ata += r1 * r1.transpose() + r2 * r2.transpose();
    }
    let eig = SymmetricEigen::new(ata);
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let lmax = eig.eigenvalues[order[8]].max(0.0);
    let l2 = eig.eigenvalues[order[1]].max(0.0);
    // Singular values of A are square roots of the eigenvalues of AᵀA.
    let cond = (lmax / l2).sqrt();
    if !(cond.is_finite() && cond < 1e12) {
        return Err(Error::DegenerateConfiguration(format!("DLT system condition number {cond:e}")));
    }
    let h = eig.eigenvectors.column(order[0]);
    let hn = Mat3::from_row_slice(h.as_slice());
    let nd_inv = nd.try_inverse().ok_or_else(|| Error::DegenerateConfiguration("image normalizer".into()))?;
    Ok(nd_inv * hn * ns)
}

fn decompose_homography(h: &Mat3, object_points: &[Vec3]) -> Result<RigidTransform> {
    let h1 = h.column(0).into_owned();
    let h2 = h.column(1).into_owned();
    let h3 = h.column(2).into_owned();
    let scale = 2.0 / (h1.norm() + h2.norm());
    for sign in [1.0, -1.0] {
        let l = sign * scale;
        let r1 = h1 * l;
        let r2 = h2 * l;
        let r3 = r1.cross(&r2);
        let t = h3 * l;
        let m = Mat3::from_columns(&[r1, r2, r3]);
        let pose = project_to_se3(&m, &t)?;
        if object_points.iter().all(|p| pose.apply_point(p).z > 0.0) {
            return Ok(pose);
        }
    }
    Err(Error::BehindCamera)
}

fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn reprojection_cost(cam: &PinholeCamera, corr: &CorrespondenceSet, pose: &RigidTransform) -> f64 {
    corr.object_points
        .iter()
        .zip(&corr.image_points)
        .map(|(p, uv)| {
            let pc = pose.apply_point(p);
            if pc.z <= 0.0 {
                return f64::INFINITY;
            }
            (Vec2::new(cam.fx * pc.x / pc.z + cam.cx, cam.fy * pc.y / pc.z + cam.cy) - uv).norm_squared()
        })
        .sum()
}

/// Gauss–Newton on squared reprojection error with a left-multiplicative
/// rotation update; stops when the step norm drops below 1e-10.
fn refine_pose(cam: &PinholeCamera, corr: &CorrespondenceSet, mut pose: RigidTransform) -> RigidTransform {
    let mut cost = reprojection_cost(cam, corr, &pose);
    for _ in 0..100 {
        let mut jtj = SMatrix::<f64, 6, 6>::zeros();
        let mut jtr = SVector::<f64, 6>::zeros();
        for (p, uv) in corr.object_points.iter().zip(&corr.image_points) {
            let rp = pose.rotation * p;
            let pc = rp + pose.translation;
            let iz = 1.0 / pc.z;
            let res = Vec2::new(cam.fx * pc.x * iz + cam.cx - uv.x, cam.fy * pc.y * iz + cam.cy - uv.y);
            let dproj = nalgebra::Matrix2x3::new(
                cam.fx * iz, 0.0, -cam.fx * pc.x * iz * iz,
                0.0, cam.fy * iz, -cam.fy * pc.y * iz * iz,
            );
            let mut dpc = SMatrix::<f64, 3, 6>::zeros();
            dpc.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&rp)));
            dpc.fixed_view_mut::<3, 3>(0, 3).copy_from(&Mat3::identity());
            let j = dproj * dpc;
            jtj += j.transpose() * j;
            jtr += j.transpose() * res;
        }
        let Some(step) = jtj.cholesky().map(|c| c.solve(&(-jtr))) else { break };
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..20 {
            let s = step * alpha;
            let dw = Vec3::new(s[0], s[1], s[2]);
            let dt = Vec3::new(s[3], s[4], s[5]);
            let delta = RigidTransform::from_rotation_vector(dw);
            let cand = RigidTransform::new(delta.rotation * pose.rotation, pose.translation + dt);
            let c = reprojection_cost(cam, corr, &cand);
            if c <= cost {
                pose = cand;
                cost = c;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted || (step * alpha).norm() < 1e-10 {
            break;
        }
    }
    // Re-orthogonalize accumulated rounding.
    project_to_se3(&pose.rotation, &pose.translation).unwrap_or(pose)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// RGB → depth camera transform: per-entry median of `T'_i · T_i⁻¹` (the
/// exact element-wise L1 minimizer), projected back onto SE(3).
pub fn relative_extrinsic(set: &CalibrationSet) -> Result<RigidTransform> {
    if set.rgb_poses.len() != set.depth_poses.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} depth poses", set.rgb_poses.len()),
            actual: set.depth_poses.len().to_string(),
        });
    }
    if set.rgb_poses.is_empty() {
        return Err(Error::EmptySet);
    }
    let relatives: Vec<RigidTransform> =
        set.depth_poses.iter().zip(&set.rgb_poses).map(|(d, r)| d.compose(&r.inverse())).collect();
    median_transform(&relatives)
}

/// Entry-wise median of the 3×4 blocks, projected onto SE(3).
pub fn median_transform(ts: &[RigidTransform]) -> Result<RigidTransform> {
    if ts.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut buf = vec![0.0; ts.len()];
    let mut entry = |f: &dyn Fn(&RigidTransform) -> f64| {
        for (b, t) in buf.iter_mut().zip(ts) {
            *b = f(t);
        }
        median(&mut buf)
    };
    let rotation = Mat3::from_fn(|r, c| entry(&|t: &RigidTransform| t.rotation[(r, c)]));
    let translation = Vec3::from_fn(|r, _| entry(&|t: &RigidTransform| t.translation[r]));
    project_to_se3(&rotation, &translation)
}

/// Least-squares plane through `points` (smallest principal direction).
pub fn fit_plane_least_squares(points: &[Vec3]) -> Result<Plane> {
    if points.len() < 3 {
        return Err(Error::TooFewPoints { needed: 2, got: points.len() });
    }
    let c = points.iter().sum::<Vec3>() / points.len() as f64;
    let mut cov = Mat3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let i = eig.eigenvalues.imin();
    Plane::through(&c, &eig.eigenvectors.column(i).into_owned())
}

/// RANSAC plane maximizing the inlier count, then a least-squares refit on the
/// consensus set. Returned inliers are measured against the refit plane.
pub fn fit_plane_ransac(pts: &PointCloud, threshold_mm: f64, iterations: usize, seed: u64) -> Result<(Plane, Vec<usize>)> {
    let n = pts.len();
    if n < 3 {
        return Err(Error::TooFewPoints { needed: 2, got: n });
    }
    if !(threshold_mm > 0.0) {
        return Err(Error::InvalidInput(format!("threshold must be positive, got {threshold_mm}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<[usize; 3]> = (0..iterations.max(1))
        .map(|_| {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            let mut c = rng.random_range(0..n - 2);
            for m in [a.min(b), a.max(b)] {
                if c >= m {
                    c += 1;
                }
            }
            [a, b, c]
        })
        .collect();
    let p = &pts.positions;
    let best = samples
        .par_iter()
        .enumerate()
        .filter_map(|(it, s)| {
            let normal = (p[s[1]] - p[s[0]]).cross(&(p[s[2]] - p[s[0]]));
            let plane = Plane::through(&p[s[0]], &normal).ok()?;
            if !plane.normal.iter().all(|v| v.is_finite()) {
                return None;
            }
            let count = p.iter().filter(|q| plane.signed_distance(q).abs() <= threshold_mm).count();
            Some((count, it, plane))
        })
        .reduce_with(|a, b| if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a });
    let Some((count, _, plane)) = best else {
        return Err(Error::NoConsensus(0.0));
    };
    let ratio = count as f64 / n as f64;
    if ratio < 0.1 {
        return Err(Error::NoConsensus(ratio));
    }
    let inliers: Vec<Vec3> = p.iter().filter(|q| plane.signed_distance(q).abs() <= threshold_mm).copied().collect();
    let mut refit = fit_plane_least_squares(&inliers)?;
    if refit.normal.dot(&plane.normal) < 0.0 {
        refit = refit.flipped();
    }
    let idx: Vec<usize> = (0..n).filter(|&i| refit.signed_distance(&p[i]).abs() <= threshold_mm).collect();
    Ok((refit, idx))
}

/// Least-squares refits on a shrinking slab, starting at `slab_mm` around
/// `plane`; later rounds keep points within three residual RMS (never below
/// `floor_mm`).
pub fn refine_plane(points: &[Vec3], plane: &Plane, slab_mm: f64, floor_mm: f64) -> Result<Plane> {
    let mut current = *plane;
    let mut slab = slab_mm;
    for _ in 0..6 {
        let inliers: Vec<Vec3> = points.iter().filter(|p| current.signed_distance(p).abs() <= slab).copied().collect();
        let mut next = fit_plane_least_squares(&inliers)?;
        if next.normal.dot(&current.normal) < 0.0 {
            next = next.flipped();
        }
        let rms = (inliers.iter().map(|p| next.signed_distance(p).powi(2)).sum::<f64>() / inliers.len() as f64).sqrt();
        current = next;
        slab = (3.0 * rms).min(slab).max(floor_mm);
    }
    Ok(current)
}

/// `α = (d0 + d1) / d1` with `d0` the signed offset of the fitted plane from
/// the reference origin (positive toward the camera) and `d1` the camera's
/// distance to the fitted plane.
pub fn estimate_scale_scene(plane: &Plane, cam_origin_ref: &Vec3) -> Result<f64> {
    let s = plane.signed_distance(cam_origin_ref);
    let oriented = if s < 0.0 { plane.flipped() } else { *plane };
    let d1 = s.abs();
    if !(d1 > 1e-6) {
        return Err(Error::CameraOnPlane(d1));
    }
    let d0 = -oriented.offset;
    Ok((d0 + d1) / d1)
}

pub fn estimate_scale_global(scenes: &[(Plane, Vec3)]) -> Result<ScaleEstimate> {
    if scenes.is_empty() {
        return Err(Error::EmptyInput);
    }
    let per_scene = scenes.iter().map(|(p, o)| estimate_scale_scene(p, o)).collect::<Result<Vec<_>>>()?;
    let global = per_scene.iter().sum::<f64>() / per_scene.len() as f64;
    Ok(ScaleEstimate { per_scene, global })
}

pub fn apply_scale(d: &DepthMap, alpha: f64) -> Result<DepthMap> {
    if !(alpha > 0.0) {
        return Err(Error::NonPositiveScale(alpha));
    }
    Ok(DepthMap {
        width: d.width,
        height: d.height,
        values: d.values.iter().map(|&v| if v > 0.0 { v * alpha } else { v }).collect(),
    })
}
