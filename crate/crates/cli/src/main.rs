use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use turnscan::pipeline::{self, Config};
use turnscan::session::CaptureSession;
use turnscan::Error;

#[derive(Parser)]
#[command(name = "turnscan", version, about = "Turntable multi-view object reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic session with ground truth.
    Simulate(Args),
    /// Chessboard poses, relative extrinsic and depth scale.
    Calibrate(Args),
    /// Fuse, register, mesh and re-dye.
    Reconstruct(Args),
    /// Compare the mesh against reference dimensions and silhouettes.
    Evaluate(Args),
    /// Simulate, then run every stage.
    All(Args),
}

#[derive(clap::Args)]
struct Args {
    /// Session manifest (written by `simulate` and `all`).
    #[arg(long)]
    session: PathBuf,
    /// JSON overrides merged over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Args {
    fn config(&self) -> Result<Config, Error> {
        let cfg = Config::load(self.config.as_deref())?;
        Ok(match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Simulate(a) => {
            let cfg = a.config()?;
            let session = pipeline::with_workers(&cfg.pipeline, || pipeline::run_simulate(&a.session, &cfg.simulation))?;
            println!("simulated {} scenes into {}", session.scenes.len(), session.root.display());
        }
        Command::Calibrate(a) => {
            let cfg = a.config()?;
            let session = CaptureSession::load(&a.session)?;
            let bundle = pipeline::with_workers(&cfg.pipeline, || pipeline::run_calibrate(&session, &cfg.pipeline))?;
            println!("alpha {:.6}", bundle.alpha);
            println!("relative {:?}", bundle.relative.to_rows());
        }
        Command::Reconstruct(a) => {
            let cfg = a.config()?;
            let session = CaptureSession::load(&a.session)?;
            let rec = pipeline::with_workers(&cfg.pipeline, || {
                let bundle = pipeline::load_bundle(&session, &cfg.pipeline)?;
                pipeline::run_reconstruct(&session, &bundle, &cfg.pipeline)
            })?;
            println!("mesh {} vertices, {} triangles", rec.mesh.vertices.len(), rec.mesh.triangles.len());
            if let Some(r) = &rec.registration {
                println!("registration rmse {:.4} mm", r.final_rmse);
            }
        }
        Command::Evaluate(a) => {
            let cfg = a.config()?;
            let session = CaptureSession::load(&a.session)?;
            let report = pipeline::with_workers(&cfg.pipeline, || {
                let bundle = pipeline::load_bundle(&session, &cfg.pipeline)?;
                let (mesh, registration) = pipeline::load_reconstruction(&session)?;
                pipeline::run_evaluate(&mesh, &session, &bundle, registration.as_ref(), &cfg.pipeline)
            })?;
            print_report(&report);
        }
        Command::All(a) => {
            let cfg = a.config()?;
            let out = pipeline::run_all(&a.session, &cfg)?;
            print_report(&out.report);
        }
    }
    Ok(())
}

fn print_report(r: &pipeline::EvaluationReport) {
    let d = r.mesh_dims_mm;
    println!("mesh dims {:.3} x {:.3} x {:.3} mm", d.x, d.y, d.z);
    if let Some(e) = r.dim_errors_mm {
        println!("dim errors {:.3} {:.3} {:.3} mm", e.x, e.y, e.z);
    }
    println!("alpha {:.6}", r.alpha);
    if let (Some(iou), Some(c)) = (r.mean_iou, r.mean_contour_distance_px) {
        println!("silhouette iou {iou:.4}, contour distance {c:.3} px");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
