//! Turntable object reconstruction.
//!
//! The pipeline takes multi-view depth + RGB captures of an object on a
//! turntable and produces a colored triangle mesh:
//!
//! 1. per-scene chessboard poses ([`calibration::estimate_pose_pnp`]) and the
//!    robust RGB↔depth relative extrinsic ([`calibration::relative_extrinsic`]);
//! 2. depth-scale equalization against the chessboard plane;
//! 3. bounding-box segmentation, denoising and fusion ([`cloud`]);
//! 4. registration of the upright and flipped captures ([`registration`]);
//! 5. Poisson meshing ([`meshing`]) and re-dyeing from the RGB views ([`texturing`]).
//!
//! [`simulator`] renders synthetic sessions with exact ground truth, and
//! [`pipeline`] wires the stages together over on-disk sessions.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod cloud;
pub mod error;
pub mod geometry;
pub mod hull;
pub mod io;
pub mod kdtree;
pub mod meshing;
pub mod pipeline;
pub mod registration;
pub mod registry;
pub mod session;
pub mod simulator;
pub mod texturing;

pub use error::{Error, Result};
pub use geometry::{DepthMap, PinholeCamera, Plane, PointCloud, RgbImage, RigidTransform, TriangleMesh, Vec2, Vec3};
