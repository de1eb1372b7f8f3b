//! Alignment of the flipped capture onto the upright one.
//!
//! Both registration variants share one multi-scale Gauss–Newton engine. The
//! per-correspondence objective is
//!
//! ```text
//! E = (1 − δ)·r_color² + δ·r_geo²
//! r_geo   = (T·s − q)·n_q
//! r_color = L(q) + g_q·(T·s − q) − L(s)
//! ```
//!
//! where `L` is luminance and `g_q` the target's color gradient on its
//! tangent plane. Point-to-plane ICP is the `δ = 1` member of the family.

use std::sync::Arc;

use nalgebra::{SMatrix, SVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::voxel_downsample;
use crate::error::{Error, Result};
use crate::geometry::{Mat3, PointCloud, RigidTransform, Vec3};
use crate::kdtree::KdIndex;
use crate::registry::{Named, Registry};

pub const DEFAULT_OVERLAP_FRACTION: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpParams {
    /// Correspondence gate at the finest scale; coarser scales scale it with the voxel size.
    pub max_correspondence_mm: f64,
    pub max_iterations: Vec<usize>,
    /// Voxel size per scale, coarse to fine. `0` disables decimation at that scale.
    pub voxel_schedule_mm: Vec<f64>,
    /// Weight δ of the geometric term.
    pub color_weight: f64,
    pub convergence_eps: f64,
    /// Neighbors used for the target color gradients.
    pub gradient_k: usize,
    /// Pairs whose normals disagree by more than this are dropped (needs source normals).
    pub max_normal_angle_deg: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self::for_resolution(1.0)
    }
}

impl IcpParams {
    /// Schedule `[4, 2, 1] × base` with a `4 × voxel` correspondence gate.
    pub fn for_resolution(base_mm: f64) -> Self {
        Self {
            max_correspondence_mm: 4.0 * base_mm,
            max_iterations: vec![50, 30, 14],
            voxel_schedule_mm: vec![4.0 * base_mm, 2.0 * base_mm, base_mm],
            color_weight: 0.968,
            convergence_eps: 1e-6,
            gradient_k: 20,
            max_normal_angle_deg: 45.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations.is_empty() || self.max_iterations.len() != self.voxel_schedule_mm.len() {
            return Err(Error::InvalidInput(format!(
                "iteration schedule ({}) and voxel schedule ({}) must have equal non-zero length",
                self.max_iterations.len(),
                self.voxel_schedule_mm.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.color_weight) {
            return Err(Error::InvalidInput(format!("color weight δ must lie in [0, 1], got {}", self.color_weight)));
        }
        if !(self.max_correspondence_mm > 0.0) || self.voxel_schedule_mm.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidInput("distances must be positive".into()));
        }
        Ok(())
    }

    fn gate_at(&self, scale: usize) -> f64 {
        let finest = *self.voxel_schedule_mm.last().unwrap();
        let v = self.voxel_schedule_mm[scale];
        if finest > 0.0 && v > 0.0 {
            self.max_correspondence_mm * v / finest
        } else {
            self.max_correspondence_mm
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcpResult {
    pub transform: RigidTransform,
    /// Geometric (point-to-plane) RMSE over the final correspondences, mm.
    pub final_rmse: f64,
    pub iterations_used: Vec<usize>,
    pub converged: bool,
    /// Objective after each accepted iteration, one list per scale (first entry is the start value).
    pub objective_history: Vec<Vec<f64>>,
}

/// A registration algorithm selectable by name.
pub trait Registrar: Named + Send + Sync {
    fn register(&self, source: &PointCloud, target: &PointCloud, init: &RigidTransform, params: &IcpParams) -> Result<IcpResult>;
}

pub struct PointToPlaneIcp;
pub struct ColoredIcp;

impl Named for PointToPlaneIcp {
    fn name(&self) -> &'static str {
        "point_to_plane"
    }
}

impl Registrar for PointToPlaneIcp {
    fn register(&self, source: &PointCloud, target: &PointCloud, init: &RigidTransform, params: &IcpParams) -> Result<IcpResult> {
        icp_point_to_plane(source, target, init, params)
    }
}

impl Named for ColoredIcp {
    fn name(&self) -> &'static str {
        "colored_icp"
    }
}

impl Registrar for ColoredIcp {
    fn register(&self, source: &PointCloud, target: &PointCloud, init: &RigidTransform, params: &IcpParams) -> Result<IcpResult> {
        colored_icp(source, target, init, params)
    }
}

pub fn registrars() -> Registry<dyn Registrar> {
    Registry::<dyn Registrar>::new("registration").with(Arc::new(ColoredIcp)).with(Arc::new(PointToPlaneIcp))
}

/// Rotation by π about the reference X axis, translated so the bounding-box
/// centers coincide. Maps the flipped cloud into the upright frame.
pub fn initial_flip_guess(upright: &PointCloud, flipped: &PointCloud) -> Result<RigidTransform> {
    let (ulo, uhi) = upright.aabb().ok_or(Error::EmptyCloud)?;
    let (flo, fhi) = flipped.aabb().ok_or(Error::EmptyCloud)?;
    let flip = RigidTransform::rot_x(std::f64::consts::PI);
    // Rx(π) maps axis-aligned boxes to axis-aligned boxes, so centers map exactly.
    let center_after = flip.apply_point(&((flo + fhi) * 0.5));
    Ok(flip.with_translation((ulo + uhi) * 0.5 - center_after))
}

/// Keeps points whose z lies in the central `fraction` of the cloud's z extent.
pub fn trim_overlap_band(pts: &PointCloud, fraction: f64) -> Result<PointCloud> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::BadFraction(fraction));
    }
    let Some((lo, hi)) = pts.aabb() else { return Ok(pts.clone()) };
    let mid = 0.5 * (lo.z + hi.z);
    let half = 0.5 * fraction * (hi.z - lo.z);
    Ok(pts.filter(|_, p| (p.z - mid).abs() <= half))
}

pub fn luminance(c: &Vec3) -> f64 {
    0.299 * c.x + 0.587 * c.y + 0.114 * c.z
}

pub fn icp_point_to_plane(source: &PointCloud, target: &PointCloud, init: &RigidTransform, params: &IcpParams) -> Result<IcpResult> {
    run_engine(source, target, init, params, None)
}

pub fn colored_icp(source: &PointCloud, target: &PointCloud, init: &RigidTransform, params: &IcpParams) -> Result<IcpResult> {
    if source.colors.is_none() || target.colors.is_none() {
        return Err(Error::MissingColors);
    }
    run_engine(source, target, init, params, Some(params.color_weight))
}

/// Target-side data for one scale.
struct TargetModel {
    cloud: PointCloud,
    index: KdIndex,
    luminance: Vec<f64>,
    gradients: Vec<Vec3>,
}

struct SourceModel {
    positions: Vec<Vec3>,
    normals: Option<Vec<Vec3>>,
    luminance: Vec<f64>,
}

fn decimate(pts: &PointCloud, voxel: f64) -> Result<PointCloud> {
    if voxel > 0.0 {
        voxel_downsample(pts, voxel)
    } else {
        Ok(pts.clone())
    }
}

/// Least-squares color gradient on each point's tangent plane, constrained
/// orthogonal to the normal.
fn color_gradients(cloud: &PointCloud, index: &KdIndex, lum: &[f64], k: usize) -> Vec<Vec3> {
    let normals = cloud.normals.as_ref().expect("target normals checked by caller");
    (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let q = cloud.positions[i];
            let n = normals[i];
            let nn = index.knn(&q, k);
            let mut a = Mat3::zeros();
            let mut b = Vec3::zeros();
            for &(j, _) in &nn {
                if j == i {
                    continue;
                }
                let d = cloud.positions[j] - q;
                let f = d - n * n.dot(&d);
                a += f * f.transpose();
                b += f * (lum[j] - lum[i]);
            }
            a += n * n.transpose() * nn.len() as f64;
            a.try_inverse().map(|inv| inv * b).unwrap_or_else(Vec3::zeros)
        })
        .collect()
}

#[derive(Clone, Copy)]
struct Pair {
    src: usize,
    tgt: usize,
}

struct Evaluation {
    objective: f64,
    geo_sq: f64,
    pairs: Vec<Pair>,
}

struct Engine<'a> {
    src: &'a SourceModel,
    tgt: &'a TargetModel,
    gate: f64,
    geo_weight: f64,
    color_weight: f64,
    cos_limit: f64,
}

impl Engine<'_> {
    fn correspondences(&self, t: &RigidTransform) -> Vec<Option<usize>> {
        let tgt_normals = self.tgt.cloud.normals.as_ref().unwrap();
        let gate2 = self.gate * self.gate;
        (0..self.src.positions.len())
            .into_par_iter()
            .map(|i| {
                let p = t.apply_point(&self.src.positions[i]);
                let (j, d2) = self.tgt.index.nearest(&p)?;
                if d2 > gate2 {
                    return None;
                }
                if let Some(ns) = &self.src.normals {
                    if t.apply_vector(&ns[i]).dot(&tgt_normals[j]) < self.cos_limit {
                        return None;
                    }
                }
                Some(j)
            })
            .collect()
    }

    fn residuals(&self, t: &RigidTransform, pair: Pair) -> (Vec3, f64, f64) {
        let n = self.tgt.cloud.normals.as_ref().unwrap()[pair.tgt];
        let q = self.tgt.cloud.positions[pair.tgt];
        let p = t.apply_point(&self.src.positions[pair.src]);
        let r_geo = (p - q).dot(&n);
        let r_col = if self.color_weight > 0.0 {
            self.tgt.luminance[pair.tgt] + self.tgt.gradients[pair.tgt].dot(&(p - q)) - self.src.luminance[pair.src]
        } else {
            0.0
        };
        (p, r_geo, r_col)
    }

    /// Unmatched source points pay the geometric cost of the gate distance, so
    /// the objective cannot drop just by losing correspondences.
    fn evaluate(&self, t: &RigidTransform) -> Evaluation {
        let matches = self.correspondences(t);
        let mut objective = 0.0;
        let mut geo_sq = 0.0;
        let mut pairs = Vec::with_capacity(matches.len());
        for (src, m) in matches.into_iter().enumerate() {
            match m {
                Some(tgt) => {
                    let pair = Pair { src, tgt };
                    let (_, rg, rc) = self.residuals(t, pair);
                    objective += self.geo_weight * rg * rg + self.color_weight * rc * rc;
                    geo_sq += rg * rg;
                    pairs.push(pair);
                }
                None => objective += self.geo_weight * self.gate * self.gate,
            }
        }
        Evaluation { objective, geo_sq, pairs }
    }

    fn step(&self, t: &RigidTransform, pairs: &[Pair]) -> Option<SVector<f64, 6>> {
        let normals = self.tgt.cloud.normals.as_ref().unwrap();
        let mut h = SMatrix::<f64, 6, 6>::zeros();
        let mut g = SVector::<f64, 6>::zeros();
        // Sequential accumulation in pair order keeps the result reproducible.
        for &pair in pairs {
            let (p, rg, rc) = self.residuals(t, pair);
            let n = normals[pair.tgt];
            let jg = jacobian_row(&p, &n);
            h += jg * jg.transpose() * self.geo_weight;
            g += jg * (rg * self.geo_weight);
            if self.color_weight > 0.0 {
                let d = self.tgt.gradients[pair.tgt];
                let jc = jacobian_row(&p, &d);
                h += jc * jc.transpose() * self.color_weight;
                g += jc * (rc * self.color_weight);
            }
        }
        let damping = 1e-12 * h.trace().max(1e-300);
        h += SMatrix::<f64, 6, 6>::identity() * damping;
        h.cholesky().map(|c| c.solve(&(-g)))
    }
}

fn jacobian_row(p: &Vec3, dir: &Vec3) -> SVector<f64, 6> {
    let w = p.cross(dir);
    SVector::<f64, 6>::from_column_slice(&[w.x, w.y, w.z, dir.x, dir.y, dir.z])
}

fn apply_twist(step: &SVector<f64, 6>, t: &RigidTransform) -> RigidTransform {
    let delta = RigidTransform::from_rotation_vector(Vec3::new(step[0], step[1], step[2]))
        .with_translation(Vec3::new(step[3], step[4], step[5]));
    delta.compose(t)
}

fn run_engine(
    source: &PointCloud,
    target: &PointCloud,
    init: &RigidTransform,
    params: &IcpParams,
    color_delta: Option<f64>,
) -> Result<IcpResult> {
    params.validate()?;
    if target.normals.is_none() {
        return Err(Error::MissingNormals);
    }
    if source.is_empty() || target.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let (geo_weight, color_weight) = match color_delta {
        // Geometric residuals enter in metres, the unit the default δ is tuned for.
        Some(delta) => (delta * 1e-6, 1.0 - delta),
        None => (1.0, 0.0),
    };
    let lum = |c: &PointCloud| c.colors.as_ref().map(|cs| cs.iter().map(luminance).collect()).unwrap_or_else(|| vec![0.0; c.len()]);

    let mut transform = *init;
    let mut iterations_used = Vec::new();
    let mut history = Vec::new();
    let mut converged = false;
    let mut final_rmse = 0.0;

    for (scale, (&voxel, &max_iter)) in params.voxel_schedule_mm.iter().zip(&params.max_iterations).enumerate() {
        let src_cloud = decimate(source, voxel)?;
        let tgt_cloud = decimate(target, voxel)?;
        let index = KdIndex::new(&tgt_cloud.positions);
        let tgt_lum = lum(&tgt_cloud);
        let gradients = if color_weight > 0.0 {
            color_gradients(&tgt_cloud, &index, &tgt_lum, params.gradient_k)
        } else {
            vec![Vec3::zeros(); tgt_cloud.len()]
        };
        let tgt = TargetModel { cloud: tgt_cloud, index, luminance: tgt_lum, gradients };
        let src = SourceModel { luminance: lum(&src_cloud), normals: src_cloud.normals.clone(), positions: src_cloud.positions };
        let engine = Engine {
            src: &src,
            tgt: &tgt,
            gate: params.gate_at(scale),
            geo_weight,
            color_weight,
            cos_limit: params.max_normal_angle_deg.to_radians().cos(),
        };

        let mut current = engine.evaluate(&transform);
        if current.pairs.is_empty() {
            return Err(Error::NoCorrespondences { scale, max_distance: engine.gate });
        }
        let mut objectives = vec![current.objective];
        let mut used = 0;
        converged = false;
        while used < max_iter {
            let Some(step) = engine.step(&transform, &current.pairs) else { break };
            let mut accepted = None;
            let mut scale_factor = 1.0;
            for _ in 0..8 {
                let cand = apply_twist(&(step * scale_factor), &transform);
                let eval = engine.evaluate(&cand);
                if !eval.pairs.is_empty() && eval.objective <= current.objective {
                    accepted = Some((cand, eval));
                    break;
                }
                scale_factor *= 0.5;
            }
            let Some((cand, eval)) = accepted else {
                converged = true;
                break;
            };
            used += 1;
            let rel = (current.objective - eval.objective) / current.objective.max(1e-300);
            transform = cand;
            current = eval;
            objectives.push(current.objective);
            if rel < params.convergence_eps {
                converged = true;
                break;
            }
        }
        final_rmse = (current.geo_sq / current.pairs.len() as f64).sqrt();
        iterations_used.push(used);
        history.push(objectives);
    }
    let transform = crate::geometry::project_to_se3(&transform.rotation, &transform.translation)?;
    Ok(IcpResult { transform, final_rmse, iterations_used, converged, objective_history: history })
}
