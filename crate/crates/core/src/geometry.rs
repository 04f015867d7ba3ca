//! Planar poses, SE(3) transforms, velocity commands and appearance descriptors.
//!
//! Conventions: `psi` is measured counter-clockwise from the world +x axis,
//! robot frames are x-forward / y-left / z-up, and everything is SI.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `‖RᵀR − I‖∞` and `det R` for a valid rotation.
pub const ROTATION_TOLERANCE: f64 = 1e-6;
/// Tolerance on the ℓ2 norm of a stored descriptor.
pub const DESCRIPTOR_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("non-finite value: {0}")]
    NonFinite(f64),
    #[error("descriptor dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("descriptor has zero norm")]
    ZeroNorm,
    #[error("descriptor norm {0} is not unit")]
    NotUnitNorm(f64),
    #[error("empty descriptor")]
    EmptyDescriptor,
    #[error("invalid rotation: {0}")]
    InvalidRotation(String),
}

/// Wraps an angle into `(−π, π]`, checking that it is finite.
pub fn normalize_angle(theta: f64) -> Result<f64, GeometryError> {
    if !theta.is_finite() {
        return Err(GeometryError::NonFinite(theta));
    }
    Ok(wrap_angle(theta))
}

/// Unchecked variant of [`normalize_angle`]; NaN propagates.
#[inline]
pub fn wrap_angle(theta: f64) -> f64 {
    if theta > -PI && theta <= PI {
        return theta;
    }
    let r = theta.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, psi: f64) -> Self {
        Self { x, y, psi: wrap_angle(psi) }
    }

    pub fn origin() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.psi.is_finite()
    }

    pub fn distance_to(&self, other: &Pose2) -> f64 {
        (other.x - self.x).hypot(other.y - self.y)
    }
}

/// Displacement of a target expressed in the current robot frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelPose2 {
    pub dx: f64,
    pub dy: f64,
    pub dpsi: f64,
}

impl RelPose2 {
    pub fn new(dx: f64, dy: f64, dpsi: f64) -> Self {
        Self { dx, dy, dpsi: wrap_angle(dpsi) }
    }

    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn distance(&self) -> f64 {
        self.dx.hypot(self.dy)
    }
}

/// Applies `b` in the frame of `a`.
pub fn compose_se2(a: &Pose2, b: &RelPose2) -> Pose2 {
    let (s, c) = a.psi.sin_cos();
    Pose2::new(
        a.x + b.dx * c - b.dy * s,
        a.y + b.dx * s + b.dy * c,
        a.psi + b.dpsi,
    )
}

/// Pose of `b` expressed in the frame of `a`; inverse of [`compose_se2`].
pub fn relative_se2(a: &Pose2, b: &Pose2) -> RelPose2 {
    let (s, c) = a.psi.sin_cos();
    let wx = b.x - a.x;
    let wy = b.y - a.y;
    RelPose2::new(c * wx + s * wy, -s * wx + c * wy, b.psi - a.psi)
}

/// Rigid transform `[R t; 0 1]` with an orthonormal, right-handed `R`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform3 {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Transform3 {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidRotation("non-finite entries".into()));
        }
        let err = orthonormality_error(&rotation);
        if err > ROTATION_TOLERANCE {
            return Err(GeometryError::InvalidRotation(format!(
                "orthonormality error {err:e}"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(GeometryError::InvalidRotation(format!("determinant {det}")));
        }
        Ok(Self { rotation, translation })
    }

    /// Builds from a row-major 3×3 rotation and a translation.
    pub fn from_rows(rotation: [f64; 9], translation: [f64; 3]) -> Result<Self, GeometryError> {
        Self::new(Matrix3::from_row_slice(&rotation), Vector3::from(translation))
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Embeds a planar displacement with zero roll, pitch and height.
    pub fn from_planar(rel: &RelPose2) -> Self {
        Self {
            rotation: yaw_rotation(rel.dpsi),
            translation: Vector3::new(rel.dx, rel.dy, 0.0),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Row-major rotation entries.
    pub fn rotation_rows(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)],
            r[(1, 0)], r[(1, 1)], r[(1, 2)],
            r[(2, 0)], r[(2, 1)], r[(2, 2)],
        ]
    }
}

/// `‖RᵀR − I‖∞` (largest absolute entry).
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).amax()
}

pub(crate) fn yaw_rotation(psi: f64) -> Matrix3<f64> {
    let (s, c) = psi.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Commanded linear (`v`, m/s) and angular (`w`, rad/s) velocity.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub v: f64,
    pub w: f64,
}

impl Twist {
    pub fn new(v: f64, w: f64) -> Self {
        Self { v, w }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { v: self.v * s, w: self.w * s }
    }
}

/// Unit-norm appearance embedding. Always normalized at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    values: Vec<f64>,
}

impl Descriptor {
    /// Normalizes `values` to unit ℓ2 norm.
    pub fn new(mut values: Vec<f64>) -> Result<Self, GeometryError> {
        if values.is_empty() {
            return Err(GeometryError::EmptyDescriptor);
        }
        if let Some(&bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite(bad));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(GeometryError::ZeroNorm);
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(Self { values })
    }

    /// Accepts already-normalized values verbatim (e.g. widened from a stored
    /// `f32` record), rejecting anything outside the norm tolerance.
    pub fn from_unit(values: Vec<f64>) -> Result<Self, GeometryError> {
        if values.is_empty() {
            return Err(GeometryError::EmptyDescriptor);
        }
        if let Some(&bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite(bad));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > DESCRIPTOR_NORM_TOLERANCE {
            return Err(GeometryError::NotUnitNorm(norm));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Plain dot product; callers guarantee equal dimensions.
    #[inline]
    pub(crate) fn dot(&self, other: &Descriptor) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }
}

pub fn cosine_similarity(a: &Descriptor, b: &Descriptor) -> Result<f64, GeometryError> {
    if a.dim() != b.dim() {
        return Err(GeometryError::DimensionMismatch { left: a.dim(), right: b.dim() });
    }
    Ok(a.dot(b).clamp(-1.0, 1.0))
}
