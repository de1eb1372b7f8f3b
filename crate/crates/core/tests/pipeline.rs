use std::path::{Path, PathBuf};

use turnscan::error::Error;
use turnscan::io::{read_json, read_ply_cloud};
use turnscan::pipeline::{self, CalibrationBundle, Config, PipelineConfig, BUNDLE_NAME};
use turnscan::registration::initial_flip_guess;
use turnscan::session::CaptureSession;
use turnscan::simulator::{GroundTruth, ObjectSpec, Primitive, Texture, GROUND_TRUTH_NAME, MANIFEST_NAME};
use turnscan::{RigidTransform, Vec3};

fn small_config(noise_free: bool) -> Config {
    let mut cfg = Config::default();
    cfg.simulation.rig.angles = 8;
    cfg.simulation.rig.angle_step_deg = 45.0;
    if noise_free {
        cfg.simulation.noise.depth_sigma_mm = 0.0;
    }
    cfg.pipeline.grid_dims = [48; 3];
    cfg
}

fn simulate(dir: &Path, cfg: &Config) -> CaptureSession {
    pipeline::run_simulate(&dir.join(MANIFEST_NAME), &cfg.simulation).unwrap()
}

fn truth(session: &CaptureSession) -> GroundTruth {
    read_json(&session.resolve(session.ground_truth.as_ref().unwrap())).unwrap()
}

fn aabb_error(cfg: &PipelineConfig, session: &CaptureSession) -> f64 {
    let out = pipeline::run_session(session, cfg).unwrap();
    out.report.dim_errors_mm.unwrap().max()
}

#[test]
fn flip_guess_and_registration_match_truth() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(false);
    let session = simulate(dir.path(), &cfg);
    let bundle = pipeline::run_calibrate(&session, &cfg.pipeline).unwrap();
    let rec = pipeline::run_reconstruct(&session, &bundle, &cfg.pipeline).unwrap();
    let stage = session.stage_dir("reconstruct");
    let up = read_ply_cloud(&stage.join("upright.ply")).unwrap();
    let fl = read_ply_cloud(&stage.join("flipped.ply")).unwrap();
    let gt = truth(&session).registration;
    let (r, t) = initial_flip_guess(&up, &fl).unwrap().distance_to(&gt);
    assert!(r.to_degrees() < 5.0 && t < 5.0, "flip guess off by {:.3} deg / {t:.3} mm", r.to_degrees());
    let (r, t) = rec.registration.unwrap().transform.distance_to(&gt);
    assert!(r.to_degrees() < 0.2 && t < 0.2, "registration off by {:.4} deg / {t:.4} mm", r.to_degrees());
}

#[test]
fn unit_scale_is_worse_than_estimated_scale() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(true);
    cfg.pipeline.grid_dims = [64; 3];
    let session = simulate(dir.path(), &cfg);
    let estimated = aabb_error(&cfg.pipeline, &session);
    let forced = aabb_error(&PipelineConfig { force_alpha: Some(1.0), ..cfg.pipeline.clone() }, &session);
    assert!(forced > estimated, "forced {forced} vs estimated {estimated}");
}

#[test]
fn calibration_bundle_transfers_between_objects() {
    let root = tempfile::tempdir().unwrap();
    let cfg = small_config(true);
    let box_dir = root.path().join("box");
    let box_session = simulate(&box_dir, &cfg);
    pipeline::run_calibrate(&box_session, &cfg.pipeline).unwrap();

    let mut sphere_cfg = cfg.clone();
    sphere_cfg.simulation.object = ObjectSpec {
        shape: Primitive::Sphere { center: Vec3::new(0.0, 0.0, 35.0), radius: 35.0 },
        texture: Texture::Checker { square_mm: 13.0, a: [225, 195, 60], b: [40, 70, 150] },
    };
    let sphere_session = simulate(&root.path().join("sphere"), &sphere_cfg);
    let own = pipeline::run_calibrate(&sphere_session, &cfg.pipeline).unwrap();
    let reuse_cfg = PipelineConfig { calibration_bundle: Some(box_session.stage_dir("calibrate").join(BUNDLE_NAME)), ..cfg.pipeline.clone() };
    let borrowed: CalibrationBundle = pipeline::load_bundle(&sphere_session, &reuse_cfg).unwrap();

    assert!((own.alpha - borrowed.alpha).abs() < 1e-8);
    let (r, t) = own.relative.distance_to(&borrowed.relative);
    assert!(r < 1e-9 && t < 1e-9);
    for (x, y) in own.scenes.iter().zip(&borrowed.scenes) {
        let (r, t) = x.rgb_pose.distance_to(&y.rgb_pose);
        assert!(r < 1e-9 && t < 1e-9, "{}", x.id);
    }
    let a = pipeline::run_reconstruct(&sphere_session, &own, &cfg.pipeline).unwrap();
    let b = pipeline::run_reconstruct(&sphere_session, &borrowed, &reuse_cfg).unwrap();
    let extent = |m: &turnscan::TriangleMesh| {
        let (lo, hi) = m.aabb().unwrap();
        hi - lo
    };
    let (da, db) = (extent(&a.mesh), extent(&b.mesh));
    let (r, t) = a.registration.unwrap().transform.distance_to(&b.registration.unwrap().transform);
    assert!(r.to_degrees() < 0.05 && t < 0.05, "registrations differ by {:.4} deg / {t:.4} mm", r.to_degrees());
    assert!((da - db).amax() < 0.05, "extents {da:?} vs {db:?}");
}

#[test]
fn missing_corner_file_names_the_scene() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(true);
    let session = simulate(dir.path(), &cfg);
    let victim = &session.scenes[3];
    std::fs::remove_file(session.resolve(&victim.rgb_corners)).unwrap();
    let err = pipeline::run_calibrate(&session, &cfg.pipeline).unwrap_err();
    match err.root() {
        Error::MissingCorners { scene, .. } => assert_eq!(scene, &victim.id),
        e => panic!("unexpected {e}"),
    }
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn empty_crop_reports_stage_and_scene() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(true);
    let mut session = simulate(dir.path(), &cfg);
    let bundle = pipeline::run_calibrate(&session, &cfg.pipeline).unwrap();
    session.bounding_box.min.z += 1000.0;
    session.bounding_box.max.z += 1000.0;
    let err = pipeline::run_reconstruct(&session, &bundle, &cfg.pipeline).unwrap_err();
    match &err {
        Error::Stage { scene: Some(id), .. } => assert!(session.scenes.iter().any(|s| &s.id == id)),
        e => panic!("unexpected {e}"),
    }
    assert!(matches!(err.root(), Error::EmptyCloud));
    assert!(err.to_string().contains("scene"));
}

#[test]
fn single_orientation_session_skips_registration() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(true);
    cfg.simulation.options.include_flipped = false;
    let session = simulate(dir.path(), &cfg);
    assert!(!session.has_flipped());
    let out = pipeline::run_session(&session, &cfg.pipeline).unwrap();
    assert!(out.reconstruction.registration.is_none());
    assert!(!out.reconstruction.mesh.is_empty());
    assert!(out.report.registration_rmse_mm.is_none());
    assert!(!session.stage_dir("reconstruct").join("flipped.ply").exists());
}

#[test]
fn ground_truth_mesh_overlays_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(true);
    cfg.simulation.options.include_flipped = false;
    let session = simulate(dir.path(), &cfg);
    let bundle = pipeline::run_calibrate(&session, &cfg.pipeline).unwrap();
    let mesh = cfg.simulation.object.tessellate(1.0).unwrap();
    let report = pipeline::run_evaluate(&mesh, &session, &bundle, None, &cfg.pipeline).unwrap();
    assert!(report.mean_iou.unwrap() > 0.995, "{:?}", report.mean_iou);
    assert!(report.mean_contour_distance_px.unwrap() < 0.5);
    let e = report.dim_errors_mm.unwrap();
    assert!(e.max() < 1e-9, "{e:?}");
}

#[test]
fn config_overrides_merge_onto_defaults() {
    let cfg = Config::from_overrides(&serde_json::json!({"pipeline": {"grid_dims": [32, 32, 32]}})).unwrap();
    assert_eq!(cfg.pipeline.grid_dims, [32; 3]);
    assert_eq!(cfg.pipeline.normal_k, PipelineConfig::default().normal_k);
    let bad = Config::from_overrides(&serde_json::json!({"pipeline": {"registrar": "nope"}})).unwrap_err();
    assert!(matches!(bad, Error::UnknownStrategy { .. }));
    assert_eq!(bad.exit_code(), 2);
}

#[test]
fn simulated_session_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(true);
    let session = simulate(dir.path(), &cfg);
    let loaded = CaptureSession::load(&dir.path().join(MANIFEST_NAME)).unwrap();
    assert_eq!(loaded.scenes, session.scenes);
    assert_eq!(loaded.scenes.len(), 8 * 2 * 2);
    assert!(dir.path().join(GROUND_TRUTH_NAME).is_file());
    let gt = truth(&loaded);
    assert!((gt.alpha - 1.00223).abs() < 1e-12);
    let _: PathBuf = loaded.output_root();
    let flip: RigidTransform = gt.registration;
    assert!((flip.apply_point(&Vec3::new(0.0, 0.0, 85.48)) - Vec3::zeros()).norm() < 1e-9);
}
