//! Capture-session manifest shared by the simulator and the pipeline.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cloud::Aabb;
use crate::error::{Error, Result};
use crate::geometry::{PinholeCamera, Vec3};
use crate::io::{read_json, write_json};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: String,
    pub angle_index: usize,
    pub arm_index: usize,
    pub flipped: bool,
    pub depth: PathBuf,
    pub rgb: PathBuf,
    pub depth_corners: PathBuf,
    pub rgb_corners: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureSession {
    pub version: u32,
    pub depth_camera: PinholeCamera,
    pub rgb_camera: PinholeCamera,
    pub angles: usize,
    pub arm_positions: usize,
    /// 1 for upright only, 2 with the flipped capture.
    pub orientations: usize,
    /// Crop box in the reference frame, shared by both orientations.
    pub bounding_box: Aabb,
    /// Caliper measurements of the object, if known.
    #[serde(default)]
    pub reference_dims_mm: Option<Vec3>,
    /// Simulator sidecar, relative to the manifest.
    #[serde(default)]
    pub ground_truth: Option<PathBuf>,
    /// Artifact root, relative to the manifest.
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub scenes: Vec<SceneRecord>,
    #[serde(skip)]
    pub root: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl CaptureSession {
    pub fn load(manifest: &Path) -> Result<Self> {
        let mut s: CaptureSession = read_json(manifest)?;
        s.root = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        s.validate()?;
        Ok(s)
    }

    pub fn save(&self, manifest: &Path) -> Result<()> {
        write_json(manifest, self)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn output_root(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.output_root().join(stage)
    }

    pub fn has_flipped(&self) -> bool {
        self.scenes.iter().any(|s| s.flipped)
    }

    /// Structure checks plus existence of every raster. Corner files are
    /// checked by calibration, which reports the scene by name.
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::InvalidConfig(format!("unsupported manifest version {}", self.version)));
        }
        self.depth_camera.validate()?;
        self.rgb_camera.validate()?;
        if !(1..=2).contains(&self.orientations) {
            return Err(Error::InvalidConfig(format!("orientations must be 1 or 2, got {}", self.orientations)));
        }
        let expected = self.angles * self.arm_positions * self.orientations;
        if self.scenes.len() != expected || expected == 0 {
            return Err(Error::InvalidConfig(format!(
                "scene count {} does not match {} angles × {} arm positions × {} orientations",
                self.scenes.len(),
                self.angles,
                self.arm_positions,
                self.orientations
            )));
        }
        for s in &self.scenes {
            if s.angle_index >= self.angles || s.arm_index >= self.arm_positions || (s.flipped && self.orientations < 2) {
                return Err(Error::IndexOutOfRange(format!("scene {} indices outside the session grid", s.id)));
            }
            for p in [&s.depth, &s.rgb] {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(Error::io(full, std::io::Error::new(std::io::ErrorKind::NotFound, format!("scene {} raster missing", s.id))));
                }
            }
        }
        Ok(())
    }
}
