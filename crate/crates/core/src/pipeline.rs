//! Stage orchestration over an on-disk capture session.
//!
//! `calibrate` → `reconstruct` → `evaluate`, each writing its artifacts under
//! `<output_dir>/<stage>/`. Scenes inside a stage run on the worker pool;
//! results are always gathered in manifest order so output does not depend on
//! the worker count.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::calibration::{apply_scale, estimate_pose_pnp, estimate_scale_global, fit_plane_ransac, refine_plane, relative_extrinsic, CalibrationSet};
use crate::cloud::{crop, estimate_normals, refine_normals_with_hints, remove_statistical_outliers, voxel_downsample, DEFAULT_DENOISE_K, DEFAULT_DENOISE_STD_RATIO};
use crate::error::{Error, Result, StageExt};
use crate::geometry::{backproject, bounds, PinholeCamera, Plane, PointCloud, RgbImage, RigidTransform, TriangleMesh, Vec3};
use crate::io::{read_corners, read_json, read_pfm, read_ply_mesh, read_ppm, write_json, write_ply_cloud, write_ply_mesh, write_ppm};
use crate::kdtree::KdIndex;
use crate::meshing::{reconstruct_mesh_with, DEFAULT_MARGIN_FRACTION, DEFAULT_MAX_ITERATIONS, DEFAULT_TOLERANCE};
use crate::registration::{initial_flip_guess, registrars, trim_overlap_band, IcpParams, IcpResult, DEFAULT_OVERLAP_FRACTION};
use crate::session::{CaptureSession, SceneRecord};
use crate::simulator::{generate_session, object_mask, GroundTruth, NoiseModel, ObjectSpec, RigConfig, SessionOptions};
use crate::texturing::{redye_mesh, RedyeParams, RedyeView};

pub const WORKERS_ENV: &str = "RECON_WORKERS";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub grid_dims: [usize; 3],
    pub cg_tolerance: f64,
    pub cg_max_iterations: usize,
    /// Fusion and meshing voxel; derived from the grid spacing when absent.
    pub voxel_mm: Option<f64>,
    pub normal_k: usize,
    pub denoise_k: usize,
    pub denoise_std_ratio: f64,
    pub registrar: String,
    pub icp: IcpParams,
    pub overlap_fraction: f64,
    pub ransac_threshold_mm: f64,
    pub ransac_iterations: usize,
    /// Half-height of the slab around the board plane used for the scale fit.
    pub plane_band_mm: f64,
    pub redye: RedyeParams,
    /// Skip scale equalization and use this α instead.
    pub force_alpha: Option<f64>,
    /// Reuse a bundle from another session instead of `out/calibrate/`.
    pub calibration_bundle: Option<PathBuf>,
    pub workers: Option<usize>,
    pub overlay_scenes: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            grid_dims: [64; 3],
            cg_tolerance: DEFAULT_TOLERANCE,
            cg_max_iterations: DEFAULT_MAX_ITERATIONS,
            voxel_mm: None,
            normal_k: 20,
            denoise_k: DEFAULT_DENOISE_K,
            denoise_std_ratio: DEFAULT_DENOISE_STD_RATIO,
            registrar: "colored_icp".into(),
            icp: IcpParams::default(),
            overlap_fraction: DEFAULT_OVERLAP_FRACTION,
            ransac_threshold_mm: 0.5,
            ransac_iterations: 200,
            plane_band_mm: 10.0,
            redye: RedyeParams::default(),
            force_alpha: None,
            calibration_bundle: None,
            workers: None,
            overlay_scenes: 4,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_dims.iter().any(|&d| d < 8) {
            return Err(Error::InvalidConfig(format!("grid needs at least 8 nodes per axis, got {:?}", self.grid_dims)));
        }
        if let Some(v) = self.voxel_mm {
            if !(v > 0.0) {
                return Err(Error::NonPositiveVoxel(v));
            }
        }
        if let Some(a) = self.force_alpha {
            if !(a > 0.0) {
                return Err(Error::NonPositiveScale(a));
            }
        }
        if self.normal_k < 3 || self.denoise_k < 1 {
            return Err(Error::InvalidConfig("neighborhood sizes too small".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::InvalidConfig("worker count must be positive".into()));
        }
        self.icp.validate()?;
        registrars().get(&self.registrar)?;
        crate::texturing::color_blenders().get(&self.redye.strategy)?;
        Ok(())
    }

    /// Worker count: `RECON_WORKERS` wins over the config; `None` means all cores.
    pub fn effective_workers(&self) -> Result<Option<usize>> {
        match std::env::var(WORKERS_ENV) {
            Ok(s) => match s.trim().parse::<usize>() {
                Ok(n) if n > 0 => Ok(Some(n)),
                _ => Err(Error::InvalidConfig(format!("{WORKERS_ENV} must be a positive integer, got `{s}`"))),
            },
            Err(_) => Ok(self.workers),
        }
    }
}

/// Everything `simulate` needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub rig: RigConfig,
    pub object: ObjectSpec,
    pub noise: NoiseModel,
    pub options: SessionOptions,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            rig: RigConfig::default(),
            object: ObjectSpec::checker_box(Vec3::new(77.96, 77.98, 85.48), 13.0),
            noise: NoiseModel { depth_sigma_mm: 0.1, depth_bias: 1.0 / 1.00223, ..NoiseModel::default() },
            options: SessionOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub simulation: SimulationConfig,
    pub pipeline: PipelineConfig,
}

impl Config {
    /// Defaults with a partial JSON document merged on top, key by key.
    pub fn from_overrides(overrides: &Value) -> Result<Config> {
        let mut base = serde_json::to_value(Config::default()).expect("config serializes");
        merge_json(&mut base, overrides);
        let cfg: Config = serde_json::from_value(base).map_err(|e| Error::Json { path: PathBuf::from("<config>"), source: e })?;
        cfg.pipeline.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Config> {
        match path {
            Some(p) => {
                let v: Value = read_json(p)?;
                Config::from_overrides(&v).map_err(|e| match e {
                    Error::Json { source, .. } => Error::Json { path: p.to_path_buf(), source },
                    e => e,
                })
            }
            None => Config::from_overrides(&Value::Null),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Config {
        self.simulation.noise.seed = seed;
        self.pipeline.seed = seed;
        self
    }
}

fn merge_json(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (_, Value::Null) => {}
        (slot, v) => *slot = v.clone(),
    }
}

/// Runs `f` on a pool sized by the config and `RECON_WORKERS`.
pub fn with_workers<T: Send>(cfg: &PipelineConfig, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.effective_workers()? {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))?;
    pool.install(f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneCalibration {
    pub id: String,
    pub angle_index: usize,
    pub arm_index: usize,
    pub flipped: bool,
    pub depth_pose: RigidTransform,
    pub rgb_pose: RigidTransform,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBundle {
    pub version: u32,
    /// RGB camera frame → depth camera frame.
    pub relative: RigidTransform,
    pub alpha: f64,
    pub scenes: Vec<SceneCalibration>,
}

impl CalibrationBundle {
    /// Reference → RGB camera for a turntable station, from the upright capture when present.
    pub fn rgb_pose(&self, angle_index: usize, arm_index: usize) -> Result<RigidTransform> {
        let mut matching = self.scenes.iter().filter(|s| s.angle_index == angle_index && s.arm_index == arm_index);
        let all: Vec<&SceneCalibration> = matching.by_ref().collect();
        all.iter()
            .find(|s| !s.flipped)
            .or(all.first())
            .map(|s| s.rgb_pose)
            .ok_or_else(|| Error::IndexOutOfRange(format!("bundle has no pose for angle {angle_index}, arm {arm_index}")))
    }

    pub fn depth_pose(&self, angle_index: usize, arm_index: usize) -> Result<RigidTransform> {
        Ok(self.relative.compose(&self.rgb_pose(angle_index, arm_index)?))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != BUNDLE_VERSION {
            return Err(Error::InvalidConfig(format!("unsupported calibration bundle version {}", self.version)));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::NonPositiveScale(self.alpha));
        }
        if self.scenes.is_empty() {
            return Err(Error::NoScenes);
        }
        Ok(())
    }
}

pub const BUNDLE_NAME: &str = "calibration.json";

fn corners_for(session: &CaptureSession, scene: &SceneRecord, path: &Path) -> Result<crate::calibration::CorrespondenceSet> {
    let full = session.resolve(path);
    if !full.is_file() {
        return Err(Error::MissingCorners { scene: scene.id.clone(), path: full });
    }
    read_corners(&full)
}

/// Board-plane fit in the reference frame for one scene's raw depth.
fn board_plane(session: &CaptureSession, scene: &SceneRecord, depth_pose: &RigidTransform, cfg: &PipelineConfig, index: usize) -> Result<(Plane, Vec3)> {
    let depth = read_pfm(&session.resolve(&scene.depth))?;
    let to_ref = depth_pose.inverse();
    let cloud = backproject(&session.depth_camera, &depth)?.transformed(&to_ref);
    let near = cloud.filter(|_, p| p.z.abs() <= cfg.plane_band_mm);
    let (plane, _) = fit_plane_ransac(&near, cfg.ransac_threshold_mm, cfg.ransac_iterations, cfg.seed.wrapping_add(index as u64))?;
    let plane = refine_plane(&near.positions, &plane, cfg.ransac_threshold_mm, 1e-4)?;
    Ok((plane, to_ref.translation))
}

pub fn run_calibrate(session: &CaptureSession, cfg: &PipelineConfig) -> Result<CalibrationBundle> {
    const STAGE: &str = "calibrate";
    let per_scene: Vec<(RigidTransform, RigidTransform, Plane, Vec3)> = session
        .scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            (|| {
                let rgb = estimate_pose_pnp(&session.rgb_camera, &corners_for(session, s, &s.rgb_corners)?)?;
                let depth = estimate_pose_pnp(&session.depth_camera, &corners_for(session, s, &s.depth_corners)?)?;
                let (plane, origin) = board_plane(session, s, &depth, cfg, i)?;
                Ok((rgb, depth, plane, origin))
            })()
            .scene(STAGE, || s.id.clone())
        })
        .collect::<Result<_>>()?;

    let set = CalibrationSet {
        rgb_poses: per_scene.iter().map(|r| r.0).collect(),
        depth_poses: per_scene.iter().map(|r| r.1).collect(),
    };
    let relative = relative_extrinsic(&set).stage(STAGE)?;
    let planes: Vec<(Plane, Vec3)> = per_scene.iter().map(|r| (r.2, r.3)).collect();
    let scale = estimate_scale_global(&planes).stage(STAGE)?;
    let scenes = session
        .scenes
        .iter()
        .zip(&per_scene)
        .zip(&scale.per_scene)
        .map(|((s, r), &alpha)| SceneCalibration {
            id: s.id.clone(),
            angle_index: s.angle_index,
            arm_index: s.arm_index,
            flipped: s.flipped,
            depth_pose: r.1,
            rgb_pose: r.0,
            alpha,
        })
        .collect();
    let bundle = CalibrationBundle { version: BUNDLE_VERSION, relative, alpha: scale.global, scenes };
    write_json(&session.stage_dir(STAGE).join(BUNDLE_NAME), &bundle).stage(STAGE)?;
    Ok(bundle)
}

pub fn load_bundle(session: &CaptureSession, cfg: &PipelineConfig) -> Result<CalibrationBundle> {
    let path = match &cfg.calibration_bundle {
        Some(p) => p.clone(),
        None => session.stage_dir("calibrate").join(BUNDLE_NAME),
    };
    let bundle: CalibrationBundle = read_json(&path)?;
    bundle.validate()?;
    Ok(bundle)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub mesh: TriangleMesh,
    /// Merged oriented cloud the mesh was built from.
    pub fused: PointCloud,
    /// Flipped capture → upright frame; absent for single-orientation sessions.
    pub registration: Option<IcpResult>,
    pub alpha: f64,
    pub voxel_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructSummary {
    pub alpha: f64,
    pub voxel_mm: f64,
    pub registrar: String,
    pub registration: Option<IcpResult>,
    pub points_per_scene: Vec<(String, usize)>,
    pub fused_points: usize,
    pub mesh_vertices: usize,
    pub mesh_triangles: usize,
    pub uncolored_vertices: usize,
}

/// Scaled, cropped, colored and denoised cloud of one scene in the
/// reference frame, with normals facing its camera.
fn scene_cloud(session: &CaptureSession, bundle: &CalibrationBundle, alpha: f64, scene: &SceneRecord, cfg: &PipelineConfig) -> Result<PointCloud> {
    let depth = apply_scale(&read_pfm(&session.resolve(&scene.depth))?, alpha)?;
    let rgb = read_ppm(&session.resolve(&scene.rgb))?;
    let rgb_pose = bundle.rgb_pose(scene.angle_index, scene.arm_index)?;
    let depth_pose = bundle.relative.compose(&rgb_pose);
    let cloud = crop(&backproject(&session.depth_camera, &depth)?.transformed(&depth_pose.inverse()), &session.bounding_box);
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let cloud = colorize(&cloud, &rgb, &session.rgb_camera, &rgb_pose);
    if cloud.len() <= cfg.denoise_k.max(cfg.normal_k) {
        return Err(Error::TooFewPoints { needed: cfg.denoise_k.max(cfg.normal_k), got: cloud.len() });
    }
    let (cloud, _) = remove_statistical_outliers(&cloud, cfg.denoise_k, cfg.denoise_std_ratio)?;
    estimate_normals(&cloud, cfg.normal_k, &depth_pose.inverse().translation)
}

/// Samples each point's color from the RGB view; points outside it are dropped.
fn colorize(cloud: &PointCloud, image: &RgbImage, camera: &PinholeCamera, pose: &RigidTransform) -> PointCloud {
    let mut keep = Vec::with_capacity(cloud.len());
    let mut colors = Vec::with_capacity(cloud.len());
    for (i, p) in cloud.positions.iter().enumerate() {
        let Ok(uv) = camera.project(&pose.apply_point(p)) else { continue };
        if let Some(c) = image.sample_bilinear(&uv) {
            keep.push(i);
            colors.push(c);
        }
    }
    let mut out = cloud.select(&keep);
    out.colors = Some(colors);
    out
}

fn fuse_orientation(clouds: &[&PointCloud], voxel: f64, k: usize) -> Result<PointCloud> {
    let mut all = PointCloud::default();
    for c in clouds {
        all.extend(c);
    }
    if all.is_empty() {
        return Err(Error::EmptyCloud);
    }
    refine_normals_with_hints(&voxel_downsample(&all, voxel)?, k)
}

/// Voxel size for fusion: half the spacing the meshing grid will get.
fn derive_voxel(clouds: &[PointCloud], dims: [usize; 3]) -> Result<f64> {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for c in clouds {
        if let Some((a, b)) = c.aabb() {
            lo = lo.inf(&a);
            hi = hi.sup(&b);
        }
    }
    if !(lo.x <= hi.x) {
        return Err(Error::EmptyCloud);
    }
    let ext = hi - lo;
    let margin = DEFAULT_MARGIN_FRACTION * ext.max();
    let spacing = (0..3).map(|a| (ext[a] + 2.0 * margin) / (dims[a] - 1) as f64).fold(0.0, f64::max);
    Ok(0.5 * spacing)
}

pub fn run_reconstruct(session: &CaptureSession, bundle: &CalibrationBundle, cfg: &PipelineConfig) -> Result<Reconstruction> {
    const STAGE: &str = "reconstruct";
    let alpha = cfg.force_alpha.unwrap_or(bundle.alpha);
    let clouds: Vec<PointCloud> = session
        .scenes
        .par_iter()
        .map(|s| scene_cloud(session, bundle, alpha, s, cfg).scene(STAGE, || s.id.clone()))
        .collect::<Result<_>>()?;
    let voxel = match cfg.voxel_mm {
        Some(v) => v,
        None => derive_voxel(&clouds, cfg.grid_dims).stage(STAGE)?,
    };

    let pick = |flipped: bool| -> Vec<&PointCloud> {
        session.scenes.iter().zip(&clouds).filter(|(s, _)| s.flipped == flipped).map(|(_, c)| c).collect()
    };
    let upright = fuse_orientation(&pick(false), voxel, cfg.normal_k).stage(STAGE)?;
    let dir = session.stage_dir(STAGE);
    write_ply_cloud(&dir.join("upright.ply"), &upright).stage(STAGE)?;

    let (merged, registration) = if session.has_flipped() {
        let flipped = fuse_orientation(&pick(true), voxel, cfg.normal_k).stage(STAGE)?;
        write_ply_cloud(&dir.join("flipped.ply"), &flipped).stage(STAGE)?;
        let result = (|| {
            let init = initial_flip_guess(&upright, &flipped)?;
            // Only the source is trimmed: a trimmed target would reward sliding
            // the two bands onto each other along featureless walls.
            let source = trim_overlap_band(&flipped, cfg.overlap_fraction)?;
            registrars().get(&cfg.registrar)?.register(&source, &upright, &init, &cfg.icp)
        })()
        .stage(STAGE)?;
        let mut merged = upright.clone();
        merged.extend(&flipped.transformed(&result.transform));
        (merged, Some(result))
    } else {
        log::warn!("session has no flipped capture; the mesh bottom is extrapolated");
        (upright, None)
    };
    let fused = refine_normals_with_hints(&voxel_downsample(&merged, voxel)?, cfg.normal_k).stage(STAGE)?;
    write_ply_cloud(&dir.join("fused.ply"), &fused).stage(STAGE)?;

    let mesh = reconstruct_mesh_with(&fused, cfg.grid_dims, cfg.cg_tolerance, cfg.cg_max_iterations).stage(STAGE)?;
    let images: Vec<RgbImage> = session
        .scenes
        .par_iter()
        .map(|s| read_ppm(&session.resolve(&s.rgb)).scene(STAGE, || s.id.clone()))
        .collect::<Result<_>>()?;
    let poses = view_poses(session, bundle, registration.as_ref().map(|r| &r.transform)).stage(STAGE)?;
    let views: Vec<RedyeView> = images
        .iter()
        .zip(&poses)
        .map(|(image, pose)| RedyeView { image, camera: &session.rgb_camera, pose: *pose })
        .collect();
    let (mesh, report) = redye_mesh(&mesh, &views, &cfg.redye).stage(STAGE)?;
    write_ply_mesh(&dir.join("mesh.ply"), &mesh).stage(STAGE)?;

    let summary = ReconstructSummary {
        alpha,
        voxel_mm: voxel,
        registrar: cfg.registrar.clone(),
        registration: registration.clone(),
        points_per_scene: session.scenes.iter().zip(&clouds).map(|(s, c)| (s.id.clone(), c.len())).collect(),
        fused_points: fused.len(),
        mesh_vertices: mesh.vertices.len(),
        mesh_triangles: mesh.triangles.len(),
        uncolored_vertices: report.uncolored.len(),
    };
    write_json(&dir.join("summary.json"), &summary).stage(STAGE)?;
    Ok(Reconstruction { mesh, fused, registration, alpha, voxel_mm: voxel })
}

/// Reference → RGB camera for every scene, in the upright object frame.
pub fn view_poses(session: &CaptureSession, bundle: &CalibrationBundle, registration: Option<&RigidTransform>) -> Result<Vec<RigidTransform>> {
    let undo = registration.map(RigidTransform::inverse);
    session
        .scenes
        .iter()
        .map(|s| {
            let pose = bundle.rgb_pose(s.angle_index, s.arm_index)?;
            match (s.flipped, &undo) {
                (true, Some(u)) => Ok(pose.compose(u)),
                (true, None) => Err(Error::InvalidInput(format!("scene {} is flipped but no registration is available", s.id))),
                (false, _) => Ok(pose),
            }
        })
        .collect()
}

/// Pixel-center coverage of a mesh seen through `camera` at `pose`.
pub fn rasterize_mask(mesh: &TriangleMesh, camera: &PinholeCamera, pose: &RigidTransform) -> Vec<bool> {
    let (w, h) = (camera.width, camera.height);
    let mut mask = vec![false; w * h];
    let projected: Vec<Option<[f64; 2]>> = mesh
        .vertices
        .iter()
        .map(|p| camera.project(&pose.apply_point(p)).ok().map(|uv| [uv.x, uv.y]))
        .collect();
    for t in &mesh.triangles {
        let (Some(a), Some(b), Some(c)) = (projected[t[0]], projected[t[1]], projected[t[2]]) else { continue };
        let area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
        if area.abs() < 1e-12 {
            continue;
        }
        let umin = a[0].min(b[0]).min(c[0]).ceil().max(0.0) as usize;
        let vmin = a[1].min(b[1]).min(c[1]).ceil().max(0.0) as usize;
        let umax = a[0].max(b[0]).max(c[0]).floor().min((w - 1) as f64);
        let vmax = a[1].max(b[1]).max(c[1]).floor().min((h - 1) as f64);
        if umax < 0.0 || vmax < 0.0 {
            continue;
        }
        let edge = |p: [f64; 2], q: [f64; 2], u: f64, v: f64| ((q[0] - p[0]) * (v - p[1]) - (q[1] - p[1]) * (u - p[0])) * area.signum();
        for v in vmin..=vmax as usize {
            for u in umin..=umax as usize {
                let (x, y) = (u as f64, v as f64);
                if edge(a, b, x, y) >= 0.0 && edge(b, c, x, y) >= 0.0 && edge(c, a, x, y) >= 0.0 {
                    mask[v * w + u] = true;
                }
            }
        }
    }
    mask
}

pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mask pixels with a 4-neighbor outside the mask (or on the image border).
pub fn contour_pixels(mask: &[bool], width: usize, height: usize) -> Vec<(usize, usize)> {
    let at = |u: isize, v: isize| u >= 0 && v >= 0 && (u as usize) < width && (v as usize) < height && mask[v as usize * width + u as usize];
    let mut out = Vec::new();
    for v in 0..height {
        for u in 0..width {
            if !mask[v * width + u] {
                continue;
            }
            let (ui, vi) = (u as isize, v as isize);
            if !(at(ui - 1, vi) && at(ui + 1, vi) && at(ui, vi - 1) && at(ui, vi + 1)) {
                out.push((u, v));
            }
        }
    }
    out
}

/// Symmetric mean distance between two contours, px.
pub fn mean_contour_distance(a: &[(usize, usize)], b: &[(usize, usize)]) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let to3 = |c: &[(usize, usize)]| c.iter().map(|&(u, v)| Vec3::new(u as f64, v as f64, 0.0)).collect::<Vec<_>>();
    let (pa, pb) = (to3(a), to3(b));
    let one_way = |from: &[Vec3], to: &[Vec3]| {
        let index = KdIndex::new(to);
        from.par_iter().map(|p| index.nearest(p).map_or(0.0, |(_, d2)| d2.sqrt())).sum::<f64>() / from.len() as f64
    };
    Some(0.5 * (one_way(&pa, &pb) + one_way(&pb, &pa)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneOverlay {
    pub id: String,
    pub iou: f64,
    pub contour_distance_px: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub mesh_dims_mm: Vec3,
    pub reference_dims_mm: Option<Vec3>,
    /// `|mesh − reference|` per axis.
    pub dim_errors_mm: Option<Vec3>,
    pub alpha: f64,
    pub true_alpha: Option<f64>,
    pub registration_rmse_mm: Option<f64>,
    pub scenes: Vec<SceneOverlay>,
    pub mean_iou: Option<f64>,
    pub mean_contour_distance_px: Option<f64>,
}

pub fn run_evaluate(
    mesh: &TriangleMesh,
    session: &CaptureSession,
    bundle: &CalibrationBundle,
    registration: Option<&IcpResult>,
    cfg: &PipelineConfig,
) -> Result<EvaluationReport> {
    const STAGE: &str = "evaluate";
    if mesh.is_empty() {
        return Err(Error::EmptyInput).stage(STAGE);
    }
    let (lo, hi) = bounds(&mesh.vertices).ok_or(Error::EmptyInput).stage(STAGE)?;
    let mesh_dims = hi - lo;
    let truth: Option<GroundTruth> = match &session.ground_truth {
        Some(p) => Some(read_json(&session.resolve(p)).stage(STAGE)?),
        None => None,
    };
    let reference = session.reference_dims_mm.or(truth.as_ref().map(|t| t.dimensions_mm));
    let dir = session.stage_dir(STAGE);

    let mut scenes = Vec::new();
    if let Some(truth) = &truth {
        let poses = view_poses(session, bundle, registration.map(|r| &r.transform)).stage(STAGE)?;
        let cam = &session.rgb_camera;
        scenes = session
            .scenes
            .par_iter()
            .zip(&poses)
            .enumerate()
            .map(|(i, (s, pose))| {
                (|| {
                    let true_pose = truth
                        .scenes
                        .iter()
                        .find(|t| t.id == s.id)
                        .map(|t| t.rgb_pose)
                        .ok_or_else(|| Error::InvalidInput(format!("ground truth lacks scene {}", s.id)))?;
                    let gt = object_mask(&truth.rig, &truth.object, s.flipped, &true_pose, cam);
                    let pred = rasterize_mask(mesh, cam, pose);
                    let (cg, cp) = (contour_pixels(&gt, cam.width, cam.height), contour_pixels(&pred, cam.width, cam.height));
                    if i < cfg.overlay_scenes {
                        let mut img = read_ppm(&session.resolve(&s.rgb))?;
                        for &(u, v) in &cg {
                            img.set(u, v, [0, 255, 0]);
                        }
                        for &(u, v) in &cp {
                            img.set(u, v, [255, 0, 0]);
                        }
                        write_ppm(&dir.join(format!("{}_overlay.ppm", s.id)), &img)?;
                    }
                    Ok(SceneOverlay { id: s.id.clone(), iou: mask_iou(&gt, &pred), contour_distance_px: mean_contour_distance(&cg, &cp) })
                })()
                .scene(STAGE, || s.id.clone())
            })
            .collect::<Result<_>>()?;
    }
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let report = EvaluationReport {
        mesh_dims_mm: mesh_dims,
        reference_dims_mm: reference,
        dim_errors_mm: reference.map(|r| (mesh_dims - r).abs()),
        alpha: bundle.alpha,
        true_alpha: truth.as_ref().map(|t| t.alpha),
        registration_rmse_mm: registration.map(|r| r.final_rmse),
        mean_iou: mean(scenes.iter().map(|s| s.iou).collect()),
        mean_contour_distance_px: mean(scenes.iter().filter_map(|s| s.contour_distance_px).collect()),
        scenes,
    };
    write_json(&dir.join("report.json"), &report).stage(STAGE)?;
    Ok(report)
}

/// Reads the mesh and registration written by `reconstruct`.
pub fn load_reconstruction(session: &CaptureSession) -> Result<(TriangleMesh, Option<IcpResult>)> {
    let dir = session.stage_dir("reconstruct");
    let mesh = read_ply_mesh(&dir.join("mesh.ply"))?;
    let summary: ReconstructSummary = read_json(&dir.join("summary.json"))?;
    Ok((mesh, summary.registration))
}

pub fn run_simulate(manifest: &Path, sim: &SimulationConfig) -> Result<CaptureSession> {
    let root = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let session = generate_session(&sim.rig, &sim.object, &sim.noise, &root, &sim.options).stage("simulate")?;
    if manifest.file_name() != Some(std::ffi::OsStr::new(crate::simulator::MANIFEST_NAME)) {
        session.save(manifest).stage("simulate")?;
    }
    Ok(session)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub bundle: CalibrationBundle,
    pub reconstruction: Reconstruction,
    pub report: EvaluationReport,
}

/// Simulate, calibrate, reconstruct and evaluate in one go.
pub fn run_all(manifest: &Path, cfg: &Config) -> Result<RunOutput> {
    with_workers(&cfg.pipeline, || {
        run_simulate(manifest, &cfg.simulation)?;
        let session = CaptureSession::load(manifest)?;
        run_session(&session, &cfg.pipeline)
    })
}

/// Calibrate, reconstruct and evaluate an existing session.
pub fn run_session(session: &CaptureSession, cfg: &PipelineConfig) -> Result<RunOutput> {
    let bundle = match &cfg.calibration_bundle {
        Some(_) => load_bundle(session, cfg)?,
        None => run_calibrate(session, cfg)?,
    };
    let reconstruction = run_reconstruct(session, &bundle, cfg)?;
    let report = run_evaluate(&reconstruction.mesh, session, &bundle, reconstruction.registration.as_ref(), cfg)?;
    Ok(RunOutput { bundle, reconstruction, report })
}
