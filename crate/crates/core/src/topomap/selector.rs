use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{Frame, MapError, SelectorSnapshot};
use crate::geometry::Descriptor;

/// Slack applied to time-gap comparisons so that frame clocks built from
/// `k / rate` do not miss a boundary by one ulp.
pub const TIME_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectorConfig {
    /// Minimum spacing between keyframes, seconds.
    pub dt_min: f64,
    /// A keyframe is forced once this much time has passed, seconds.
    pub dt_max: f64,
    /// Number of recent keyframes checked for appearance diversity.
    pub buffer_size: usize,
    pub tau_base: f64,
    pub tau_lo: f64,
    pub tau_hi: f64,
    /// Threshold adaptation gain per frame, per (keyframe/s) of rate error.
    pub gamma: f64,
    /// Keyframes per second the threshold is steered toward.
    pub target_rate: f64,
    /// Sliding window for the observed keyframe rate, seconds.
    pub rate_window: f64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            dt_min: 0.6,
            dt_max: 3.0,
            buffer_size: 5,
            tau_base: 0.85,
            tau_lo: 0.70,
            tau_hi: 0.95,
            gamma: 0.05,
            target_rate: 0.5,
            rate_window: 20.0,
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<(), MapError> {
        let bad = |m: &str| Err(MapError::InvalidConfig(m.to_string()));
        let finite = [
            self.dt_min, self.dt_max, self.tau_base, self.tau_lo, self.tau_hi, self.gamma,
            self.target_rate, self.rate_window,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("non-finite parameter");
        }
        if !(0.0 < self.dt_min && self.dt_min < self.dt_max) {
            return bad("require 0 < dt_min < dt_max");
        }
        if !(0.0 < self.tau_lo
            && self.tau_lo <= self.tau_base
            && self.tau_base <= self.tau_hi
            && self.tau_hi < 1.0)
        {
            return bad("require 0 < tau_lo <= tau_base <= tau_hi < 1");
        }
        if self.buffer_size < 1 {
            return bad("buffer_size must be >= 1");
        }
        if self.gamma < 0.0 || self.target_rate <= 0.0 || self.rate_window <= 0.0 {
            return bad("gamma >= 0, target_rate > 0 and rate_window > 0 required");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdmissionRule {
    /// First frame of the stream.
    First,
    /// Gap bound reached.
    Forced,
    /// Spacing satisfied and appearance sufficiently novel.
    Diverse,
    /// Fixed-interval policy.
    Interval,
}

/// Why a keyframe was kept, recorded in the map metadata for audit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Admission {
    pub rule: AdmissionRule,
    /// Largest similarity against the recent keyframe buffer, when computed.
    pub max_similarity: Option<f64>,
    /// Similarity threshold in force when the decision was made.
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decision {
    Add(Admission),
    Skip,
}

impl Decision {
    pub fn is_add(&self) -> bool {
        matches!(self, Decision::Add(_))
    }
}

/// Sequential keyframe admission over a single frame stream.
pub trait KeyframePolicy {
    fn consider(&mut self, frame: &Frame) -> Result<Decision, MapError>;
    fn snapshot(&self) -> SelectorSnapshot;
}

/// Keyframe selector combining minimum spacing, buffer diversity and a
/// rate-steered similarity threshold.
#[derive(Debug, Clone)]
pub struct KeyframeSelector {
    config: SelectorConfig,
    tau: f64,
    stream_start: Option<f64>,
    last_frame: Option<f64>,
    last_keyframe: Option<f64>,
    buffer: VecDeque<Descriptor>,
    recent_keyframes: VecDeque<f64>,
}

impl KeyframeSelector {
    pub fn new(config: SelectorConfig) -> Result<Self, MapError> {
        config.validate()?;
        Ok(Self {
            tau: config.tau_base,
            buffer: VecDeque::with_capacity(config.buffer_size),
            config,
            stream_start: None,
            last_frame: None,
            last_keyframe: None,
            recent_keyframes: VecDeque::new(),
        })
    }

    /// Current similarity threshold.
    pub fn threshold(&self) -> f64 {
        self.tau
    }

    fn max_buffer_similarity(&self, descriptor: &Descriptor) -> Result<f64, MapError> {
        let mut best = f64::NEG_INFINITY;
        for kf in &self.buffer {
            if kf.dim() != descriptor.dim() {
                return Err(MapError::DimensionMismatch { expected: kf.dim(), found: descriptor.dim() });
            }
            best = best.max(kf.dot(descriptor).clamp(-1.0, 1.0));
        }
        Ok(best)
    }

    fn observed_rate(&mut self, now: f64) -> f64 {
        let window = self.config.rate_window;
        while self.recent_keyframes.front().is_some_and(|&t| t <= now - window) {
            self.recent_keyframes.pop_front();
        }
        let elapsed = now - self.stream_start.unwrap_or(now);
        let span = elapsed.clamp(self.config.dt_max, window.max(self.config.dt_max));
        self.recent_keyframes.len() as f64 / span
    }
}

impl KeyframePolicy for KeyframeSelector {
    fn consider(&mut self, frame: &Frame) -> Result<Decision, MapError> {
        let t = frame.timestamp;
        if let Some(previous) = self.last_frame {
            if !(t > previous) {
                return Err(MapError::OutOfOrder { previous, current: t });
            }
        }
        self.last_frame = Some(t);
        self.stream_start.get_or_insert(t);

        let tau = self.tau;
        let decision = match self.last_keyframe {
            None => Decision::Add(Admission {
                rule: AdmissionRule::First,
                max_similarity: None,
                threshold: Some(tau),
            }),
            Some(last) => {
                let gap = t - last;
                let max_sim = if gap + TIME_EPSILON >= self.config.dt_min {
                    Some(self.max_buffer_similarity(&frame.descriptor)?)
                } else {
                    None
                };
                if gap + TIME_EPSILON >= self.config.dt_max {
                    Decision::Add(Admission {
                        rule: AdmissionRule::Forced,
                        max_similarity: max_sim,
                        threshold: Some(tau),
                    })
                } else if max_sim.is_some_and(|s| s < tau) {
                    Decision::Add(Admission {
                        rule: AdmissionRule::Diverse,
                        max_similarity: max_sim,
                        threshold: Some(tau),
                    })
                } else {
                    Decision::Skip
                }
            }
        };

        if decision.is_add() {
            self.last_keyframe = Some(t);
            self.recent_keyframes.push_back(t);
            if self.buffer.len() == self.config.buffer_size {
                self.buffer.pop_front();
            }
            self.buffer.push_back(frame.descriptor.clone());
        }

        // Too many keyframes lowers the threshold (harder to admit), too few raises it.
        let rate = self.observed_rate(t);
        self.tau = (self.tau - self.config.gamma * (rate - self.config.target_rate))
            .clamp(self.config.tau_lo, self.config.tau_hi);
        Ok(decision)
    }

    fn snapshot(&self) -> SelectorSnapshot {
        SelectorSnapshot::Adaptive(self.config.clone())
    }
}

/// Keeps one frame every `interval` seconds regardless of appearance.
#[derive(Debug, Clone)]
pub struct FixedIntervalSelector {
    interval: f64,
    last_frame: Option<f64>,
    last_keyframe: Option<f64>,
}

impl FixedIntervalSelector {
    pub fn new(interval: f64) -> Result<Self, MapError> {
        if !(interval.is_finite() && interval > 0.0) {
            return Err(MapError::InvalidConfig("interval must be > 0".into()));
        }
        Ok(Self { interval, last_frame: None, last_keyframe: None })
    }
}

impl KeyframePolicy for FixedIntervalSelector {
    fn consider(&mut self, frame: &Frame) -> Result<Decision, MapError> {
        let t = frame.timestamp;
        if let Some(previous) = self.last_frame {
            if !(t > previous) {
                return Err(MapError::OutOfOrder { previous, current: t });
            }
        }
        self.last_frame = Some(t);
        let add = match self.last_keyframe {
            None => true,
            Some(last) => t - last + TIME_EPSILON >= self.interval,
        };
        if add {
            self.last_keyframe = Some(t);
            return Ok(Decision::Add(Admission {
                rule: AdmissionRule::Interval,
                max_similarity: None,
                threshold: None,
            }));
        }
        Ok(Decision::Skip)
    }

    fn snapshot(&self) -> SelectorSnapshot {
        SelectorSnapshot::FixedInterval { interval: self.interval }
    }
}
