//! Relative pose between the current view and a subgoal keyframe, and its
//! projection onto the ground plane.

mod bridge;

pub use bridge::{BridgeClient, BridgeError, BridgeHandle, BridgeHello, BridgeOptions, TranslationScale};

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{relative_se2, wrap_angle, Pose2, RelPose2, Transform3};
use crate::perception::Observation;
use crate::topomap::TopoNode;

/// Axis convention an estimator reports its transforms in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameConvention {
    /// z-forward, x-right, y-down.
    CameraOptical,
    /// x-forward, y-left, z-up.
    RobotPlanar,
}

/// A failed estimate. Failures are normal outcomes the pipeline handles.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimateFailure {
    #[error("subgoal out of range ({distance:.2} m)")]
    OutOfRange { distance: f64 },
    #[error("spurious failure")]
    Spurious,
    #[error("ground truth unavailable")]
    MissingGroundTruth,
    #[error("timeout after {0} ms")]
    Timeout(u64),
    #[error("malformed reply: {0}")]
    Malformed(String),
    #[error("invalid rotation: {0}")]
    InvalidRotation(String),
    #[error("backend error: {0}")]
    Backend(String),
}

pub trait PoseEstimator {
    fn convention(&self) -> FrameConvention;
    /// Pose of `subgoal` in the frame of the current view.
    fn estimate(&mut self, current: &Observation, subgoal: &TopoNode) -> Result<Transform3, EstimateFailure>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Std of the planar translation noise per axis, meters.
    pub sigma_t: f64,
    /// Std of the yaw noise, radians.
    pub sigma_psi: f64,
    /// Largest true distance that still yields an estimate, meters.
    pub r_valid: f64,
    pub p_fail: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { sigma_t: 0.0, sigma_psi: 0.0, r_valid: 8.0, p_fail: 0.0 }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<(), String> {
        let all = [self.sigma_t, self.sigma_psi, self.r_valid, self.p_fail];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err("oracle parameters must be finite and >= 0".into());
        }
        if self.p_fail > 1.0 {
            return Err("p_fail must be <= 1".into());
        }
        Ok(())
    }
}

/// Ground-truth estimate with Gaussian noise, in `RobotPlanar` axes.
pub fn oracle_estimate<R: Rng + ?Sized>(
    true_current: &Pose2,
    true_subgoal: &Pose2,
    config: &OracleConfig,
    rng: &mut R,
) -> Result<Transform3, EstimateFailure> {
    let rel = relative_se2(true_current, true_subgoal);
    let distance = rel.distance();
    if distance > config.r_valid {
        return Err(EstimateFailure::OutOfRange { distance });
    }
    if config.p_fail > 0.0 && rng.random::<f64>() < config.p_fail {
        return Err(EstimateFailure::Spurious);
    }
    let mut noisy = rel;
    if config.sigma_t > 0.0 {
        let n = Normal::new(0.0, config.sigma_t).expect("sigma_t validated");
        noisy.dx += n.sample(rng);
        noisy.dy += n.sample(rng);
    }
    if config.sigma_psi > 0.0 {
        let n = Normal::new(0.0, config.sigma_psi).expect("sigma_psi validated");
        noisy.dpsi = wrap_angle(noisy.dpsi + n.sample(rng));
    }
    Ok(Transform3::from_planar(&noisy))
}

/// [`oracle_estimate`] bound to simulator ground truth.
#[derive(Debug, Clone)]
pub struct OracleEstimator<R> {
    config: OracleConfig,
    rng: R,
}

impl<R: Rng> OracleEstimator<R> {
    pub fn new(config: OracleConfig, rng: R) -> Result<Self, String> {
        config.validate()?;
        Ok(Self { config, rng })
    }
}

impl<R: Rng> PoseEstimator for OracleEstimator<R> {
    fn convention(&self) -> FrameConvention {
        FrameConvention::RobotPlanar
    }

    fn estimate(&mut self, current: &Observation, subgoal: &TopoNode) -> Result<Transform3, EstimateFailure> {
        let here = current.pose().ok_or(EstimateFailure::MissingGroundTruth)?;
        let there = subgoal.teach_pose.ok_or(EstimateFailure::MissingGroundTruth)?;
        oracle_estimate(&here, &there, &self.config, &mut self.rng)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProjectionError {
    #[error("non-planar pose (vertical alignment {0:.3})")]
    NonPlanar(f64),
}

/// Camera-optical to robot-planar axes: robot x = camera z, robot y = −camera x,
/// robot z = −camera y.
fn optical_to_planar() -> Matrix3<f64> {
    Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0)
}

/// Drops height, roll and pitch, keeping forward/left displacement and yaw.
pub fn project_to_ground(t: &Transform3, convention: FrameConvention) -> Result<RelPose2, ProjectionError> {
    let (r, p): (Matrix3<f64>, Vector3<f64>) = match convention {
        FrameConvention::RobotPlanar => (*t.rotation(), *t.translation()),
        FrameConvention::CameraOptical => {
            let a = optical_to_planar();
            (a * t.rotation() * a.transpose(), a * t.translation())
        }
    };
    let vertical = r[(2, 2)];
    if vertical.abs() < 0.5 {
        return Err(ProjectionError::NonPlanar(vertical));
    }
    Ok(RelPose2::new(p.x, p.y, r[(1, 0)].atan2(r[(0, 0)])))
}
