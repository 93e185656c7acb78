//! Morphable-model landmark fitting.
//!
//! Reconstructs 3D face shape, expression and weak-perspective pose from 2D
//! landmarks. Besides the single weighted fit, a dual-fit pipeline refits a
//! frontalized copy of the landmarks and fuses both parameter sets with
//! weights derived from their fitting losses.

pub mod bench;
pub mod camera;
pub mod error;
pub mod fitter;
pub mod io;
pub mod model;
pub mod pifr;

pub use camera::{
    estimate_visibility, normalize_angle, project, project_points, rotation_from_euler, LandmarkSet, Pose,
};
pub use error::{Error, Result};
pub use fitter::{fit, pose_init, update_weights, FitConfig, FitResult, ParamVector};
pub use model::{make_synthetic_model, Coefficients, MorphableModel};
pub use pifr::{frontalize, fuse, pifr_fit, Fusion, FusionMode, FusionResult, PifrOptions};
