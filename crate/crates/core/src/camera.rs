//! Euler rotations, weak-perspective projection and a visibility heuristic.
//!
//! Frame: x right, y up, z toward the viewer. `R = Rz(roll) * Ry(yaw) * Rx(pitch)`.
//! A model point `p` lands at `f * Π * R * (p + t)` where `Π` drops z.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::model::{vertex, Coefficients, MorphableModel};

/// Wraps an angle into `(-π, π]`. Values already in range are returned untouched.
pub fn normalize_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

pub fn rotation_from_euler(pitch: f64, yaw: f64, roll: f64) -> Matrix3<f64> {
    rot_z(roll) * rot_y(yaw) * rot_x(pitch)
}

/// Partial derivatives of `rotation_from_euler` w.r.t. (pitch, yaw, roll).
pub fn rotation_derivatives(pitch: f64, yaw: f64, roll: f64) -> [Matrix3<f64>; 3] {
    let (rx, ry, rz) = (rot_x(pitch), rot_y(yaw), rot_z(roll));
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    let (sr, cr) = roll.sin_cos();
    let drx = Matrix3::new(0.0, 0.0, 0.0, 0.0, -sp, -cp, 0.0, cp, -sp);
    let dry = Matrix3::new(-sy, 0.0, cy, 0.0, 0.0, 0.0, -cy, 0.0, -sy);
    let drz = Matrix3::new(-sr, -cr, 0.0, cr, -sr, 0.0, 0.0, 0.0, 0.0);
    [rz * ry * drx, rz * dry * rx, drz * ry * rx]
}

/// Weak-perspective camera pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub f: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub roll: f64,
    /// Translation applied before rotation, in model units.
    pub t: Vector3<f64>,
}

impl Pose {
    /// Validates `f > 0` and finiteness; angles are wrapped into `(-π, π]`.
    pub fn new(f: f64, pitch: f64, yaw: f64, roll: f64, t: Vector3<f64>) -> Result<Self> {
        if !(f.is_finite() && f > 0.0) {
            return Err(Error::invalid(format!("scale f must be finite and positive, got {f}")));
        }
        if ![pitch, yaw, roll].iter().all(|a| a.is_finite()) || !t.iter().all(|x| x.is_finite()) {
            return Err(Error::invalid("pose angles and translation must be finite"));
        }
        Ok(Self {
            f,
            pitch: normalize_angle(pitch),
            yaw: normalize_angle(yaw),
            roll: normalize_angle(roll),
            t,
        })
    }

    /// Builds a gauge-fixed pose from an in-plane translation `(tu, tv)`:
    /// `t = Rᵀ (tu, tv, 0)`, so `t` has no component along the viewing axis.
    pub fn from_in_plane(f: f64, pitch: f64, yaw: f64, roll: f64, tu: f64, tv: f64) -> Result<Self> {
        let r = rotation_from_euler(pitch, yaw, roll);
        Self::new(f, pitch, yaw, roll, r.transpose() * Vector3::new(tu, tv, 0.0))
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_from_euler(self.pitch, self.yaw, self.roll)
    }

    /// `Π R t`: the observable part of the translation.
    pub fn in_plane_translation(&self) -> Vector2<f64> {
        let rt = self.rotation() * self.t;
        Vector2::new(rt.x, rt.y)
    }

    /// Same projection, with `t` moved onto the gauge (zero component along
    /// the third row of `R`).
    pub fn gauge_fixed(&self) -> Self {
        let axis = self.rotation().row(2).transpose();
        Self {
            t: self.t - axis * axis.dot(&self.t),
            ..*self
        }
    }

    pub fn project_point(&self, p: &Vector3<f64>) -> Vector2<f64> {
        project_with(&self.rotation(), self.f, &self.t, p)
    }
}

fn project_with(r: &Matrix3<f64>, f: f64, t: &Vector3<f64>, p: &Vector3<f64>) -> Vector2<f64> {
    let q = r * (p + t);
    Vector2::new(f * q.x, f * q.y)
}

/// K 2D landmarks with a per-point visibility flag.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points: Vec<Vector2<f64>>,
    visibility: Vec<bool>,
    /// Set when the points were read from a y-down file and flipped on input.
    y_flipped: bool,
}

impl LandmarkSet {
    pub fn new(points: Vec<Vector2<f64>>, visibility: Vec<bool>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("landmark set must not be empty"));
        }
        if points.len() != visibility.len() {
            return Err(Error::invalid(format!(
                "{} points but {} visibility flags",
                points.len(),
                visibility.len()
            )));
        }
        if points
            .iter()
            .zip(&visibility)
            .any(|(p, &v)| v && !(p.x.is_finite() && p.y.is_finite()))
        {
            return Err(Error::invalid("visible landmark with non-finite coordinates"));
        }
        Ok(Self {
            points,
            visibility,
            y_flipped: false,
        })
    }

    pub fn all_visible(points: Vec<Vector2<f64>>) -> Result<Self> {
        let n = points.len();
        Self::new(points, vec![true; n])
    }

    pub(crate) fn with_y_flipped(mut self, flipped: bool) -> Self {
        self.y_flipped = flipped;
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector2<f64>] {
        &self.points
    }

    pub fn visibility(&self) -> &[bool] {
        &self.visibility
    }

    pub fn is_visible(&self, j: usize) -> bool {
        self.visibility[j]
    }

    pub fn visible_count(&self) -> usize {
        self.visibility.iter().filter(|v| **v).count()
    }

    pub fn y_flipped(&self) -> bool {
        self.y_flipped
    }

    /// Replaces the visibility mask, keeping the points.
    pub fn with_visibility(&self, visibility: Vec<bool>) -> Result<Self> {
        Ok(Self::new(self.points.clone(), visibility)?.with_y_flipped(self.y_flipped))
    }

    /// Axis-aligned bounding-box diagonal over all points.
    pub fn bbox_diagonal(&self) -> f64 {
        let (mut lo, mut hi) = (Vector2::repeat(f64::INFINITY), Vector2::repeat(f64::NEG_INFINITY));
        for p in &self.points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (hi - lo).norm()
    }
}

/// Projects 3D points with a pose.
pub fn project_points(points: &[Vector3<f64>], pose: &Pose) -> Vec<Vector2<f64>> {
    let r = pose.rotation();
    points.iter().map(|p| project_with(&r, pose.f, &pose.t, p)).collect()
}

/// Weak-perspective projection of the model landmarks. Every output point is visible.
pub fn project(model: &MorphableModel, coeffs: &Coefficients, pose: &Pose) -> Result<LandmarkSet> {
    let lm = model.landmarks_3d(coeffs)?;
    LandmarkSet::all_visible(project_points(&lm, pose))
}

/// A landmark is visible when the rotated centroid-to-vertex direction
/// points toward the viewer (non-negative z).
pub fn estimate_visibility(
    model: &MorphableModel,
    coeffs: &Coefficients,
    pose: &Pose,
) -> Result<Vec<bool>> {
    let shape = model.synthesize_shape(coeffs)?;
    let n = model.n_vertices();
    let centroid = (0..n).fold(Vector3::zeros(), |acc, i| acc + vertex(&shape, i)) / n as f64;
    let view_row = pose.rotation().row(2).transpose();
    Ok(model
        .landmark_indices()
        .iter()
        .map(|&i| view_row.dot(&(vertex(&shape, i) - centroid)) >= 0.0)
        .collect())
}
