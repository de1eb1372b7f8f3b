//! End-to-end acceptance checks against the simulator's ground truth.
//!
//! Each test prints one `criterion N ... PASS|FAIL` line. They share a lock so
//! the runtime budgets are measured without interference.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use turnscan::calibration::{estimate_pose_pnp, relative_extrinsic, CalibrationSet, CorrespondenceSet};
use turnscan::meshing::{reconstruct_mesh, solve_poisson, ScalarGrid, VectorGrid, DEFAULT_MARGIN_FRACTION};
use turnscan::pipeline::{self, Config};
use turnscan::registration::{colored_icp, icp_point_to_plane, IcpParams};
use turnscan::session::CaptureSession;
use turnscan::simulator::{
    generate_session, look_at, render_scene, synthetic_calibration_set, Chessboard, NoiseModel, ObjectSpec, Primitive, RigConfig,
    SceneDescription, SessionOptions, Texture,
};
use turnscan::texturing::{redye_mesh, visible_from, RedyeParams, RedyeView};
use turnscan::{PointCloud, RigidTransform, Vec3};

static SERIAL: Mutex<()> = Mutex::new(());

const PAPER_ALPHA: f64 = 1.00223;

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, pass: bool, detail: String) {
    println!("criterion {n:>2} {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n}: {detail}");
}

fn default_box() -> ObjectSpec {
    ObjectSpec::checker_box(Vec3::new(77.96, 77.98, 85.48), 13.0)
}

#[test]
fn criterion_01_scale_recovery() {
    let _g = serial();
    let start = Instant::now();
    let rig = RigConfig::default();
    let upright_only = SessionOptions { include_flipped: false, ..SessionOptions::default() };
    let mut alphas = Vec::new();
    for sigma in [0.0, 0.1] {
        let dir = tempfile::tempdir().unwrap();
        let noise = NoiseModel { depth_sigma_mm: sigma, depth_bias: 1.0 / PAPER_ALPHA, seed: 11, ..NoiseModel::default() };
        let session = generate_session(&rig, &default_box(), &noise, dir.path(), &upright_only).unwrap();
        assert_eq!(session.scenes.len(), 32);
        let bundle = pipeline::run_calibrate(&session, &pipeline::PipelineConfig::default()).unwrap();
        alphas.push(bundle.alpha);
    }
    let elapsed = start.elapsed();
    let (e0, e1) = ((alphas[0] - PAPER_ALPHA).abs(), (alphas[1] - PAPER_ALPHA).abs());
    report(
        1,
        e0 <= 1e-6 && e1 <= 5e-4 && elapsed < Duration::from_secs(30),
        format!("alpha noise-free {:.9} (err {e0:.2e}), sigma 0.1 {:.9} (err {e1:.2e}), {:.1}s", alphas[0], alphas[1], elapsed.as_secs_f64()),
    );
}

#[test]
fn criterion_02_dimensional_accuracy() {
    let _g = serial();
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = Config::default();
    cfg.simulation.object = default_box();
    cfg.simulation.noise.depth_sigma_mm = 0.1;
    cfg.pipeline.grid_dims = [128; 3];
    let out = pipeline::run_all(&dir.path().join("session.json"), &cfg).unwrap();
    let elapsed = start.elapsed();
    let e = out.report.dim_errors_mm.unwrap();
    let d = out.report.mesh_dims_mm;
    report(
        2,
        e.max() <= 0.2 && elapsed < Duration::from_secs(300),
        format!(
            "mesh {:.3} x {:.3} x {:.3} mm, errors ({:.3}, {:.3}, {:.3}) mm, {:.0}s",
            d.x,
            d.y,
            d.z,
            e.x,
            e.y,
            e.z,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_03_relative_extrinsic_robustness() {
    let _g = serial();
    let truth = RigConfig::default().relative;
    let (set, outlier) = synthetic_calibration_set(&truth, 75, 0.2, 0.5, 15, 10.0, 50.0, 2020);
    let with = relative_extrinsic(&set).unwrap();
    let keep: Vec<usize> = (0..outlier.len()).filter(|&i| !outlier[i]).collect();
    let clean = CalibrationSet {
        rgb_poses: keep.iter().map(|&i| set.rgb_poses[i]).collect(),
        depth_poses: keep.iter().map(|&i| set.depth_poses[i]).collect(),
    };
    let without = relative_extrinsic(&clean).unwrap();
    let (r, t) = with.distance_to(&truth);
    let (dr, dt) = with.distance_to(&without);
    report(
        3,
        r.to_degrees() < 0.1 && t < 0.1 && dr.to_degrees() < 0.02 && dt < 0.02,
        format!(
            "{} scenes: error {:.4} deg / {:.4} mm, outlier influence {:.4} deg / {:.4} mm",
            set.rgb_poses.len(),
            r.to_degrees(),
            t,
            dr.to_degrees(),
            dt
        ),
    );
}

#[test]
fn criterion_04_pnp_exactness() {
    let _g = serial();
    let rig = RigConfig::default();
    let board = Chessboard { rows: 11, cols: 15, square_mm: 20.0 };
    let cam = rig.rgb_camera;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: (f64, f64) = (0.0, 0.0);
    let mut poses = 0;
    while poses < 10 {
        let eye = Vec3::new(rng.random_range(-200.0..200.0), rng.random_range(-200.0..200.0), rng.random_range(250.0..550.0));
        let target = Vec3::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0), 0.0);
        let pose = RigidTransform::rot_z(rng.random_range(-PI..PI)).compose(&look_at(&eye, &target));
        let mut obj = Vec::new();
        let mut img = Vec::new();
        for x in board.corners() {
            let uv = cam.project(&pose.apply_point(&x)).unwrap();
            if cam.contains(&uv) {
                obj.push(x);
                img.push(uv);
            }
        }
        if obj.len() < 20 {
            continue;
        }
        let est = estimate_pose_pnp(&cam, &CorrespondenceSet::new(obj, img).unwrap()).unwrap();
        let (r, t) = est.distance_to(&pose);
        worst = (worst.0.max(r), worst.1.max(t));
        poses += 1;
    }
    report(4, worst.0 < 1e-6 && worst.1 < 1e-6, format!("worst of 10 poses: {:.2e} rad, {:.2e} mm", worst.0, worst.1));
}

/// Lattice samples of a textured cylinder turned by `turn` about its axis.
fn cylinder_cloud(radius: f64, height: f64, texture: &Texture, turn: f64, phase: f64) -> PointCloud {
    let mut positions = Vec::new();
    let mut normals = Vec::new();
    let mut colors = Vec::new();
    let rot = RigidTransform::rot_z(turn);
    let n_theta = (2.0 * PI * radius).round() as usize;
    let n_z = height.round() as usize;
    for i in 0..n_theta {
        let th = 2.0 * PI * (i as f64 + phase) / n_theta as f64;
        for k in 0..n_z {
            let p = Vec3::new(radius * th.cos(), radius * th.sin(), (k as f64 + phase) * height / n_z as f64);
            positions.push(rot.apply_point(&p));
            normals.push(rot.apply_vector(&Vec3::new(th.cos(), th.sin(), 0.0)));
            colors.push(texture.color_at(&p));
        }
    }
    let step = 1.0;
    let m = (radius / step) as i64;
    for a in -m..=m {
        for b in -m..=m {
            let p = Vec3::new((a as f64 + phase) * step, (b as f64 + phase) * step, height);
            if p.x * p.x + p.y * p.y < radius * radius {
                positions.push(rot.apply_point(&p));
                normals.push(Vec3::z());
                colors.push(texture.color_at(&p));
            }
        }
    }
    PointCloud { positions, colors: Some(colors), normals: Some(normals) }
}

#[test]
fn criterion_05_registration_ambiguity() {
    let _g = serial();
    let texture = Texture::AxisGradient { axis: 0, from_mm: -30.0, to_mm: 30.0, a: [20, 20, 20], b: [235, 235, 235] };
    let turn = 30f64.to_radians();
    let target = cylinder_cloud(30.0, 60.0, &texture, 0.0, 0.0);
    let source = cylinder_cloud(30.0, 60.0, &texture, turn, 0.5);
    let truth = RigidTransform::rot_z(-turn);
    let params = IcpParams::default();
    let p2p = icp_point_to_plane(&source, &target, &RigidTransform::identity(), &params).unwrap();
    let col = colored_icp(&source, &target, &RigidTransform::identity(), &params).unwrap();
    let err = |t: &RigidTransform| t.distance_to(&truth).0.to_degrees();
    let (e_p2p, e_col) = (err(&p2p.transform), err(&col.transform));
    report(5, e_p2p >= 25.0 && e_col <= 0.5, format!("rotation error point_to_plane {e_p2p:.3} deg, colored_icp {e_col:.4} deg"));
}

fn manufactured(n: usize) -> (VectorGrid, ScalarGrid) {
    let h = 1.0 / (n - 1) as f64;
    let mut v = VectorGrid::filled([n; 3], Vec3::zeros(), h, Vec3::zeros()).unwrap();
    let mut exact = ScalarGrid::filled([n; 3], Vec3::zeros(), h, 0.0).unwrap();
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let p = v.node_position(i, j, k) * PI;
                let idx = v.index(i, j, k);
                exact.values[idx] = p.x.sin() * p.y.sin() * p.z.sin();
                v.values[idx] = Vec3::new(p.x.cos() * p.y.sin() * p.z.sin(), p.x.sin() * p.y.cos() * p.z.sin(), p.x.sin() * p.y.sin() * p.z.cos()) * PI;
            }
        }
    }
    (v, exact)
}

#[test]
fn criterion_06_poisson_correctness() {
    let _g = serial();
    let mut errors = Vec::new();
    for n in [17, 33, 65] {
        let (v, exact) = manufactured(n);
        let s = solve_poisson(&v, 1e-11, 5000).unwrap();
        assert!(s.converged);
        let num: f64 = s.chi.values.iter().zip(&exact.values).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = exact.values.iter().map(|b| b * b).sum();
        errors.push((num / den).sqrt());
    }
    let ratios = [errors[0] / errors[1], errors[1] / errors[2]];

    let (r, c) = (25.0, Vec3::new(4.0, -3.0, 40.0));
    let n = 40_000;
    let golden = PI * (3.0 - 5f64.sqrt());
    let dirs: Vec<Vec3> = (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let s = (1.0 - y * y).sqrt();
            Vec3::new(s * (golden * i as f64).cos(), y, s * (golden * i as f64).sin())
        })
        .collect();
    let cloud = PointCloud { positions: dirs.iter().map(|d| c + d * r).collect(), colors: None, normals: Some(dirs) };
    let mesh = reconstruct_mesh(&cloud, [64; 3], 1e-7).unwrap();
    let spacing = 2.0 * r * (1.0 + 2.0 * DEFAULT_MARGIN_FRACTION) / 63.0;
    let rms = (mesh.vertices.iter().map(|v| ((v - c).norm() - r).powi(2)).sum::<f64>() / mesh.vertices.len() as f64).sqrt();
    report(
        6,
        ratios.iter().all(|&q| q >= 3.5) && rms < spacing,
        format!(
            "errors {:.3e} {:.3e} {:.3e}, ratios {:.3} {:.3}; sphere rms {rms:.4} mm < spacing {spacing:.4} mm",
            errors[0], errors[1], errors[2], ratios[0], ratios[1]
        ),
    );
}

#[test]
fn criterion_07_hidden_point_removal() {
    let _g = serial();
    let (r, distance, n) = (10.0, 40.0, 50_000);
    let golden = PI * (3.0 - 5f64.sqrt());
    let pts: Vec<Vec3> = (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let s = (1.0 - y * y).sqrt();
            Vec3::new(s * (golden * i as f64).cos(), s * (golden * i as f64).sin(), y) * r
        })
        .collect();
    let eye = Vec3::new(0.0, 0.0, distance);
    let mask = visible_from(&pts, &eye, 100.0).unwrap();
    // points the viewpoint can actually see: cos θ > r / distance
    let cap = r / distance;
    let (mut near, mut near_vis, mut far, mut far_vis) = (0usize, 0usize, 0usize, 0usize);
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
    let (vis, fp) = (near_vis as f64 / near as f64, far_vis as f64 / far as f64);
    report(7, vis >= 0.99 && fp <= 0.01, format!("visible cap {:.4}, far-side false positives {:.4}", vis, fp));
}

#[test]
fn criterion_08_texture_fidelity() {
    let _g = serial();
    let rig = RigConfig::default();
    let object = default_box();
    let scene = SceneDescription { object: object.clone(), flipped: false };
    let noise = NoiseModel::default();
    let mut renders = Vec::new();
    for arm in 0..rig.arm_positions.len() {
        for angle in 0..rig.angles {
            renders.push(render_scene(&rig, &scene, angle, arm, &noise).unwrap());
        }
    }
    let views: Vec<RedyeView> = renders.iter().map(|r| RedyeView { image: &r.rgb, camera: &rig.rgb_camera, pose: r.rgb_pose }).collect();
    let mut mesh = object.tessellate(1.6).unwrap();
    let truth = mesh.vertex_colors.take().unwrap();
    let (dyed, rep) = redye_mesh(&mesh, &views, &RedyeParams::default()).unwrap();
    let colors = dyed.vertex_colors.unwrap();
    let uncolored: std::collections::HashSet<usize> = rep.uncolored.iter().copied().collect();
    let mut sum = Vec3::zeros();
    let mut count = 0;
    for i in (0..colors.len()).filter(|i| !uncolored.contains(i)) {
        sum += (colors[i] - truth[i]).abs() * 255.0;
        count += 1;
    }
    let mean = sum / count as f64;
    report(
        8,
        mean.max() <= 2.0,
        format!("{} views, {count} dyed vertices, mean error ({:.3}, {:.3}, {:.3}) / 255", views.len(), mean.x, mean.y, mean.z),
    );
}

#[test]
fn criterion_09_reprojection_overlay() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = Config::default();
    cfg.simulation.object = ObjectSpec {
        shape: Primitive::Sphere { center: Vec3::new(0.0, 0.0, 40.0), radius: 40.0 },
        texture: Texture::Checker { square_mm: 13.0, a: [225, 195, 60], b: [40, 70, 150] },
    };
    cfg.simulation.noise.depth_sigma_mm = 0.0;
    cfg.pipeline.grid_dims = [64; 3];
    let out = pipeline::run_all(&dir.path().join("session.json"), &cfg).unwrap();
    let iou = out.report.mean_iou.unwrap();
    let contour = out.report.mean_contour_distance_px.unwrap();
    let worst = out.report.scenes.iter().map(|s| s.iou).fold(1.0, f64::min);
    report(
        9,
        iou >= 0.99 && contour <= 1.0,
        format!("{} views: mean IoU {iou:.4} (worst {worst:.4}), mean contour distance {contour:.3} px", out.report.scenes.len()),
    );
}

fn file_bytes(root: &Path, rel: &str) -> Vec<u8> {
    std::fs::read(root.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

#[test]
fn criterion_10_determinism_and_budget() {
    let _g = serial();
    let cfg = Config::default().with_seed(7);
    let mut runs = Vec::new();
    let mut times = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let start = Instant::now();
        pipeline::run_all(&dir.path().join("session.json"), &cfg).unwrap();
        times.push(start.elapsed());
        let session = CaptureSession::load(&dir.path().join("session.json")).unwrap();
        let out = session.output_root();
        let files = ["calibrate/calibration.json", "reconstruct/fused.ply", "reconstruct/mesh.ply", "evaluate/report.json"];
        runs.push(files.map(|f| file_bytes(&out, f)));
        let first_depth = session.resolve(&session.scenes[0].depth);
        runs.last_mut().unwrap()[0].extend(std::fs::read(first_depth).unwrap());
    }
    let identical = runs[0] == runs[1];
    let slowest = times.iter().max().unwrap().as_secs_f64();
    report(
        10,
        identical && slowest < 300.0,
        format!("bit-identical artifacts: {identical}; run times {:.0}s and {:.0}s", times[0].as_secs_f64(), times[1].as_secs_f64()),
    );
}
