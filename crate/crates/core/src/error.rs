use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point lies at non-positive depth z = {0}")]
    NonPositiveDepth(f64),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },
    #[error("matrix is singular (condition {0:e})")]
    SingularMatrix(f64),
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("no homography decomposition places the target in front of the camera")]
    BehindCamera,
    #[error("empty calibration set")]
    EmptySet,
    #[error("too few points: need more than {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("RANSAC found no consensus (best inlier ratio {0:.3})")]
    NoConsensus(f64),
    #[error("camera origin lies on the plane (distance {0:e} mm)")]
    CameraOnPlane(f64),
    #[error("empty input")]
    EmptyInput,
    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("voxel size must be positive, got {0}")]
    NonPositiveVoxel(f64),

    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("overlap fraction must lie in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("no correspondences within {max_distance} mm at scale {scale}")]
    NoCorrespondences { scale: usize, max_distance: f64 },
    #[error("point cloud has no colors")]
    MissingColors,
    #[error("point cloud has no usable normals")]
    MissingNormals,
    #[error("conjugate gradient did not reach tolerance {tol:e} (residual {residual:e} after {iterations} iterations)")]
    DidNotConverge { tol: f64, residual: f64, iterations: usize },

    #[error("degenerate hull input: {0}")]
    DegenerateInput(String),
    #[error("no scenes supplied")]
    NoScenes,

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("invalid rig configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown {kind} strategy `{name}` (available: {available})")]
    UnknownStrategy { kind: &'static str, name: String, available: String },

    #[error("missing corner file for scene {scene}: {path}")]
    MissingCorners { scene: String, path: PathBuf },
    #[error("{path}: parse error at byte {offset}: expected {expected}")]
    Parse { path: String, offset: usize, expected: String },
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("stage `{stage}`{}: {source}", scene.as_ref().map(|s| format!(" scene {s}")).unwrap_or_default())]
    Stage {
        stage: &'static str,
        scene: Option<String>,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<String>, offset: usize, expected: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), offset, expected: expected.into() }
    }

    /// Wraps an error with the pipeline stage (and optionally scene) it came from.
    pub fn at_stage(self, stage: &'static str, scene: Option<String>) -> Self {
        Error::Stage { stage, scene, source: Box::new(self) }
    }

    /// The innermost error, skipping stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    /// Process exit code: 3 for numerical failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::SingularMatrix(_)
            | Error::DegenerateConfiguration(_)
            | Error::BehindCamera
            | Error::NoConsensus(_)
            | Error::CameraOnPlane(_)
            | Error::NoCorrespondences { .. }
            | Error::DidNotConverge { .. }
            | Error::DegenerateInput(_)
            | Error::NonPositiveDepth(_) => 3,
            _ => 2,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
    fn scene(self, stage: &'static str, scene: impl FnOnce() -> String) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.at_stage(stage, None))
    }

    fn scene(self, stage: &'static str, scene: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| e.at_stage(stage, Some(scene())))
    }
}
