//! Polar-coordinate go-to-pose feedback for a unicycle.
//!
//! The relative target pose is expressed as (rho, alpha, beta), mapped to a raw
//! twist, shaped by three heuristics (near-goal taper, heading damping, final
//! alignment) and finally scaled as a whole so both limits hold while the
//! commanded curvature is preserved.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrap_angle, RelPose2, Twist};

/// Below this distance the bearing is undefined and treated as zero.
pub const DEGENERATE_RHO: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Polar {
    pub rho: f64,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid control gains: {0}")]
pub struct GainsError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlGains {
    pub k_rho: f64,
    pub k_alpha: f64,
    pub k_beta: f64,
    pub v_max: f64,
    pub w_max: f64,
    /// Forward speed tapers linearly inside this distance.
    pub rho_slow: f64,
    /// Inside this distance only the final yaw is regulated.
    pub rho_align: f64,
    pub k_final: f64,
    pub alpha_damp_exponent: f64,
}

impl Default for ControlGains {
    fn default() -> Self {
        Self {
            k_rho: 1.0,
            k_alpha: 2.0,
            k_beta: -0.8,
            v_max: 1.4,
            w_max: 1.0,
            rho_slow: 0.4,
            rho_align: 0.05,
            k_final: 2.5,
            alpha_damp_exponent: 2.0,
        }
    }
}

impl ControlGains {
    pub fn validate(&self) -> Result<(), GainsError> {
        let all = [
            self.k_rho,
            self.k_alpha,
            self.k_beta,
            self.v_max,
            self.w_max,
            self.rho_slow,
            self.rho_align,
            self.k_final,
            self.alpha_damp_exponent,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(GainsError("all gains must be finite".into()));
        }
        if !(self.k_rho > 0.0 && self.k_alpha > 0.0 && self.k_beta < 0.0) {
            return Err(GainsError("need k_rho > 0, k_alpha > 0, k_beta < 0".into()));
        }
        if self.k_alpha - self.k_rho <= 0.0 {
            return Err(GainsError("need k_alpha > k_rho".into()));
        }
        if !(self.v_max > 0.0 && self.w_max > 0.0) {
            return Err(GainsError("velocity limits must be positive".into()));
        }
        if !(0.0 < self.rho_align && self.rho_align < self.rho_slow) {
            return Err(GainsError("need 0 < rho_align < rho_slow".into()));
        }
        if self.k_final <= 0.0 || self.alpha_damp_exponent < 0.0 {
            return Err(GainsError("k_final must be positive and the damping exponent non-negative".into()));
        }
        Ok(())
    }
}

pub fn to_polar(xi: &RelPose2) -> Polar {
    let rho = xi.dx.hypot(xi.dy);
    if rho < DEGENERATE_RHO {
        return Polar { rho, alpha: 0.0, beta: wrap_angle(xi.dpsi) };
    }
    let alpha = xi.dy.atan2(xi.dx);
    Polar { rho, alpha, beta: wrap_angle(xi.dpsi - alpha) }
}

pub fn raw_command(p: &Polar, g: &ControlGains) -> Twist {
    Twist::new(g.v_max * (1.0 - (-g.k_rho * p.rho).exp()), g.k_alpha * p.alpha + g.k_beta * p.beta)
}

pub fn shape_command(raw: Twist, p: &Polar, xi: &RelPose2, g: &ControlGains) -> Twist {
    let mut v = raw.v * (p.rho / g.rho_slow).min(1.0);
    v *= p.alpha.cos().max(0.0).powf(g.alpha_damp_exponent);
    let mut w = raw.w;
    if p.rho < g.rho_align {
        v *= p.rho / g.rho_align;
        w = g.k_final * wrap_angle(xi.dpsi);
    }
    Twist::new(v, w)
}

pub fn limit_command(t: Twist, g: &ControlGains) -> Twist {
    let mut s: f64 = 1.0;
    if t.v != 0.0 {
        s = s.min(g.v_max / t.v.abs());
    }
    if t.w != 0.0 {
        s = s.min(g.w_max / t.w.abs());
    }
    t.scaled(s)
}

/// Every intermediate of one control evaluation, for tracing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommandBreakdown {
    pub polar: Polar,
    pub raw: Twist,
    pub shaped: Twist,
    pub limited: Twist,
}

pub fn command(xi: &RelPose2, g: &ControlGains) -> CommandBreakdown {
    let polar = to_polar(xi);
    let raw = raw_command(&polar, g);
    let shaped = shape_command(raw, &polar, xi, g);
    CommandBreakdown { polar, raw, shaped, limited: limit_command(shaped, g) }
}
