//! Closed repeat loop: embed, localize, pick a subgoal, estimate the relative
//! pose to it, control, and step the simulator on a fixed simulated clock.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{command, ControlGains, GainsError, Polar};
use crate::geometry::{Pose2, RelPose2, Twist};
use crate::localization::{LocalizationConfig, LocalizationError, Localizer};
use crate::perception::{DescriptorProvider, Observation, Session};
use crate::relpose::{project_to_ground, PoseEstimator};
use crate::sim::{check_collision, step, Contact, Polyline, RowMode, SimError, SimState, SimWorld, TrajectoryRow};
use crate::topomap::TopoMap;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("map has {0} node(s); at least 2 are required")]
    MapTooSmall(usize),
    #[error(transparent)]
    Localization(#[from] LocalizationError),
    #[error(transparent)]
    Gains(#[from] GainsError),
    #[error(transparent)]
    World(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Control rate, Hz.
    pub rate: f64,
    /// Goal distance to the last node, meters.
    pub subgoal_reach_rho: f64,
    /// Consecutive in-reach cycles required to declare the goal.
    pub goal_hold_cycles: usize,
    pub failure_hold_speed_factor: f64,
    pub max_consecutive_failures: usize,
    /// Cross-track distance that triggers a guidance reset, meters.
    pub intervention_threshold: f64,
    /// Number of resets tolerated before the run is aborted.
    pub intervention_budget: usize,
    /// Simulated-time limit, seconds. `None` allows 60 s plus 3 s per meter of route.
    pub max_duration: Option<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            rate: 5.0,
            subgoal_reach_rho: 0.7,
            goal_hold_cycles: 3,
            failure_hold_speed_factor: 0.3,
            max_consecutive_failures: 10,
            intervention_threshold: 1.5,
            intervention_budget: 20,
            max_duration: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let positive = [self.rate, self.subgoal_reach_rho, self.intervention_threshold];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(PipelineError::InvalidConfig("rate and thresholds must be positive".into()));
        }
        if self.goal_hold_cycles == 0 || self.max_consecutive_failures == 0 {
            return Err(PipelineError::InvalidConfig("cycle counts must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.failure_hold_speed_factor) {
            return Err(PipelineError::InvalidConfig("failure_hold_speed_factor must be in [0, 1]".into()));
        }
        if let Some(d) = self.max_duration {
            if !(d.is_finite() && d > 0.0) {
                return Err(PipelineError::InvalidConfig("max_duration must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Everything a repeat run needs besides the backends.
#[derive(Debug, Clone, Default)]
pub struct RepeatConfig {
    pub pipeline: PipelineConfig,
    pub localization: LocalizationConfig,
    pub gains: ControlGains,
    /// Start pose; defaults to the first node's teach pose, else the route start.
    pub start: Option<Pose2>,
    /// Teach path used for cross-track monitoring; defaults to the node poses, else the route.
    pub reference: Option<Vec<Pose2>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", content = "reason", rename_all = "snake_case")]
pub enum Outcome {
    ReachedGoal,
    Aborted(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PolarTrace {
    pub rho: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl From<Polar> for PolarTrace {
    fn from(p: Polar) -> Self {
        Self { rho: p.rho, alpha: p.alpha, beta: p.beta }
    }
}

/// One control cycle, written as a line of the cycle log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CycleTrace {
    pub cycle: usize,
    pub t: f64,
    pub belief_mode: usize,
    /// Node estimate used for subgoal selection (belief mode or raw argmax).
    pub estimate: usize,
    pub raw_best: usize,
    pub subgoal: usize,
    /// Node closest to the true pose, when node poses are known.
    pub true_node: Option<usize>,
    pub xi: Option<RelPose2>,
    pub polar: Option<PolarTrace>,
    pub raw: Option<Twist>,
    pub shaped: Option<Twist>,
    pub limited: Twist,
    /// `"ok"` or the failure description.
    pub estimator: String,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepeatRun {
    pub trajectory: Vec<TrajectoryRow>,
    pub cycles: Vec<CycleTrace>,
    pub outcome: Outcome,
    pub interventions: usize,
    pub collisions: usize,
}

impl RepeatRun {
    /// Cycle log as newline-delimited JSON.
    pub fn cycles_ndjson(&self) -> String {
        let mut out = String::new();
        for c in &self.cycles {
            out.push_str(&serde_json::to_string(c).expect("trace serializes"));
            out.push('\n');
        }
        out
    }
}

fn nearest_node(poses: &[Pose2], p: &Pose2) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, q) in poses.iter().enumerate() {
        let d = p.distance_to(q);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

pub fn run_repeat(
    map: &TopoMap,
    world: &SimWorld,
    provider: &mut dyn DescriptorProvider,
    estimator: &mut dyn PoseEstimator,
    config: &RepeatConfig,
) -> Result<RepeatRun, PipelineError> {
    let pc = &config.pipeline;
    pc.validate()?;
    config.gains.validate()?;
    world.validate()?;
    if map.len() < 2 {
        return Err(PipelineError::MapTooSmall(map.len()));
    }
    let n = map.len();
    let node_poses = map.teach_poses();
    let reference_poses = match (&config.reference, &node_poses) {
        (Some(r), _) if r.len() >= 2 => r.clone(),
        (_, Some(p)) => p.clone(),
        _ => world.route.clone(),
    };
    let reference = Polyline::from_poses(&reference_poses);
    let dt = 1.0 / pc.rate;
    let max_time = pc.max_duration.unwrap_or(60.0 + 3.0 * reference.length());
    let start = config.start.or_else(|| node_poses.as_ref().map(|p| p[0])).unwrap_or_else(|| world.start());

    let mut localizer = Localizer::new(config.localization.clone(), n)?;
    let mut state = SimState::at(start);
    let mut trajectory = Vec::new();
    let mut cycles = Vec::new();
    let mut last_ok = Twist::zero();
    let mut failures = 0usize;
    let mut in_reach = 0usize;
    let mut latch = 0usize;
    let mut interventions = 0usize;
    let mut collisions = 0usize;
    let mut was_colliding = false;
    let mut row_mode_override = None;

    for cycle in 0.. {
        let t = cycle as f64 * dt;
        let started = Instant::now();
        let obs = Observation::simulated(state.pose);

        let (proposal, embed_status) = match provider.embed(&obs, Session::Repeat) {
            Ok(d) => (Some(localizer.propose(&d, map)?), None),
            Err(e) => (None, Some(format!("embedding failed: {e}"))),
        };
        let belief_mode = localizer.belief().mode();
        let (estimate, raw_best, proposed) = match &proposal {
            Some(p) => (p.estimate, p.raw_best, p.subgoal),
            None => (belief_mode, belief_mode, (belief_mode + config.localization.lookahead).min(n - 1)),
        };
        let subgoal = proposed.max(latch);
        latch = subgoal;

        let estimated = match embed_status {
            Some(e) => Err(e),
            None => estimator
                .estimate(&obs, &map.nodes[subgoal])
                .map_err(|e| e.to_string())
                .and_then(|t3| project_to_ground(&t3, estimator.convention()).map_err(|e| e.to_string())),
        };

        let mut trace = CycleTrace {
            cycle,
            t,
            belief_mode,
            estimate,
            raw_best,
            subgoal,
            true_node: node_poses.as_ref().map(|p| nearest_node(p, &state.pose)),
            xi: None,
            polar: None,
            raw: None,
            shaped: None,
            limited: Twist::zero(),
            estimator: "ok".into(),
            latency_ms: 0.0,
        };

        let mut outcome = None;
        let cmd = match estimated {
            Ok(xi) => {
                if let Some(p) = &proposal {
                    localizer.commit(p);
                    trace.belief_mode = p.belief.mode();
                }
                failures = 0;
                let out = command(&xi, &config.gains);
                trace.xi = Some(xi);
                trace.polar = Some(out.polar.into());
                trace.raw = Some(out.raw);
                trace.shaped = Some(out.shaped);
                last_ok = out.limited;
                // a reached intermediate subgoal is passed even if localization lags
                if subgoal < n - 1 && out.polar.rho < pc.subgoal_reach_rho {
                    latch = subgoal + 1;
                }
                if subgoal == n - 1 && out.polar.rho < pc.subgoal_reach_rho {
                    in_reach += 1;
                    if in_reach >= pc.goal_hold_cycles {
                        outcome = Some(Outcome::ReachedGoal);
                    }
                } else {
                    in_reach = 0;
                }
                out.limited
            }
            Err(reason) => {
                failures += 1;
                in_reach = 0;
                trace.estimator = reason;
                if failures >= pc.max_consecutive_failures {
                    outcome = Some(Outcome::Aborted("estimator failures".into()));
                }
                last_ok.scaled(pc.failure_hold_speed_factor)
            }
        };
        trace.limited = cmd;
        trace.latency_ms = started.elapsed().as_secs_f64() * 1e3;

        let mode = row_mode_override.take().unwrap_or(if trace.estimator == "ok" { RowMode::Track } else { RowMode::Hold });
        trajectory.push(TrajectoryRow::new(t, state.pose, cmd, Some(subgoal), mode));
        cycles.push(trace);

        if outcome.is_none() && t >= max_time {
            outcome = Some(Outcome::Aborted("time limit".into()));
        }
        if let Some(outcome) = outcome {
            return Ok(RepeatRun { trajectory, cycles, outcome, interventions, collisions });
        }

        state = step(&state, cmd, dt);

        let colliding = matches!(check_collision(&state, world), Contact::Collision { .. });
        if colliding && !was_colliding {
            collisions += 1;
        }
        was_colliding = colliding;

        let proj = reference.project(state.pose.x, state.pose.y);
        if proj.distance > pc.intervention_threshold {
            interventions += 1;
            if interventions > pc.intervention_budget {
                return Ok(RepeatRun {
                    trajectory,
                    cycles,
                    outcome: Outcome::Aborted("intervention budget".into()),
                    interventions,
                    collisions,
                });
            }
            state.pose = Pose2::new(proj.x, proj.y, proj.heading);
            latch = 0;
            last_ok = Twist::zero();
            was_colliding = false;
            row_mode_override = Some(RowMode::Intervention);
        }
    }
    unreachable!("the cycle loop only exits by returning")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perception::{FieldConfig, FieldProvider, PerceptionError};
    use crate::relpose::{EstimateFailure, OracleConfig, OracleEstimator};
    use crate::topomap::{build_map, Frame, SelectorConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn oracle(p_fail: f64) -> OracleEstimator<ChaCha8Rng> {
        OracleEstimator::new(OracleConfig { p_fail, ..OracleConfig::default() }, ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    fn two_node_map(provider: &mut FieldProvider) -> TopoMap {
        let frames: Vec<Frame> = [Pose2::origin(), Pose2::new(0.5, 0.0, 0.0)]
            .iter()
            .enumerate()
            .map(|(i, p)| Frame {
                timestamp: i as f64 * 4.0,
                descriptor: provider.embed_pose(p, Session::Teach),
                observation: Observation::simulated(*p).bytes,
                teach_pose: Some(*p),
            })
            .collect();
        let map = build_map(frames, &SelectorConfig::default()).unwrap();
        assert_eq!(map.len(), 2);
        map
    }

    #[test]
    fn short_hop_reaches_goal() {
        let mut provider = FieldProvider::new(FieldConfig::default()).unwrap();
        let map = two_node_map(&mut provider);
        let world = SimWorld::new(vec![Pose2::origin(), Pose2::new(0.5, 0.0, 0.0)]).unwrap();
        let run = run_repeat(&map, &world, &mut provider, &mut oracle(0.0), &RepeatConfig::default()).unwrap();
        assert_eq!(run.outcome, Outcome::ReachedGoal);
        assert!(run.trajectory.last().unwrap().t <= 5.0);
        assert_eq!(run.trajectory.len(), run.cycles.len());
    }

    #[test]
    fn always_failing_estimator_aborts() {
        let mut provider = FieldProvider::new(FieldConfig::default()).unwrap();
        let map = two_node_map(&mut provider);
        let world = SimWorld::new(vec![Pose2::origin(), Pose2::new(0.5, 0.0, 0.0)]).unwrap();
        let run = run_repeat(&map, &world, &mut provider, &mut oracle(1.0), &RepeatConfig::default()).unwrap();
        assert_eq!(run.outcome, Outcome::Aborted("estimator failures".into()));
        assert_eq!(run.cycles.len(), 10);
        assert!(run.trajectory.iter().all(|r| r.mode == RowMode::Hold));
    }

    struct Flaky {
        inner: OracleEstimator<ChaCha8Rng>,
        calls: usize,
    }

    impl PoseEstimator for Flaky {
        fn convention(&self) -> crate::relpose::FrameConvention {
            self.inner.convention()
        }
        fn estimate(&mut self, o: &Observation, n: &crate::topomap::TopoNode) -> Result<crate::geometry::Transform3, EstimateFailure> {
            self.calls += 1;
            if self.calls == 3 {
                Err(EstimateFailure::Spurious)
            } else {
                self.inner.estimate(o, n)
            }
        }
    }

    #[test]
    fn failure_holds_scaled_command_and_keeps_belief() {
        let mut provider = FieldProvider::new(FieldConfig::default()).unwrap();
        let map = two_node_map(&mut provider);
        let world = SimWorld::new(vec![Pose2::origin(), Pose2::new(0.5, 0.0, 0.0)]).unwrap();
        let mut est = Flaky { inner: oracle(0.0), calls: 0 };
        let cfg = RepeatConfig {
            pipeline: PipelineConfig { goal_hold_cycles: 50, ..Default::default() },
            start: Some(Pose2::new(-3.0, 0.0, 0.0)),
            ..Default::default()
        };
        let run = run_repeat(&map, &world, &mut provider, &mut est, &cfg).unwrap();
        let (prev, failed) = (&run.cycles[1], &run.cycles[2]);
        assert_eq!(failed.estimator, "spurious failure");
        assert!((failed.limited.v - 0.3 * prev.limited.v).abs() < 1e-15);
        assert!((failed.limited.w - 0.3 * prev.limited.w).abs() < 1e-15);
        assert_eq!(run.trajectory[2].mode, RowMode::Hold);
        assert_eq!(run.cycles[3].estimator, "ok");
    }

    struct Broken;

    impl DescriptorProvider for Broken {
        fn dimension(&self) -> usize {
            64
        }
        fn embed(&mut self, _: &Observation, _: Session) -> Result<crate::geometry::Descriptor, PerceptionError> {
            Err(PerceptionError::Backend("camera unplugged".into()))
        }
    }

    #[test]
    fn embedding_failure_counts_as_estimator_failure() {
        let mut provider = FieldProvider::new(FieldConfig::default()).unwrap();
        let map = two_node_map(&mut provider);
        let world = SimWorld::new(vec![Pose2::origin(), Pose2::new(0.5, 0.0, 0.0)]).unwrap();
        let run = run_repeat(&map, &world, &mut Broken, &mut oracle(0.0), &RepeatConfig::default()).unwrap();
        assert_eq!(run.outcome, Outcome::Aborted("estimator failures".into()));
        assert!(run.cycles[0].estimator.contains("camera unplugged"));
    }

    #[test]
    fn config_validation() {
        assert!(PipelineConfig::default().validate().is_ok());
        assert!(PipelineConfig { rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(PipelineConfig { goal_hold_cycles: 0, ..Default::default() }.validate().is_err());
        assert!(PipelineConfig { failure_hold_speed_factor: 1.5, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn off_route_start_triggers_intervention() {
        let mut provider = FieldProvider::new(FieldConfig::default()).unwrap();
        let map = two_node_map(&mut provider);
        let world = SimWorld::new(vec![Pose2::origin(), Pose2::new(0.5, 0.0, 0.0)]).unwrap();
        let cfg = RepeatConfig { start: Some(Pose2::new(0.0, 3.0, 0.0)), ..Default::default() };
        let run = run_repeat(&map, &world, &mut provider, &mut oracle(0.0), &cfg).unwrap();
        assert_eq!(run.interventions, 1);
        assert_eq!(run.trajectory[1].mode, RowMode::Intervention);
        assert!(run.trajectory[1].y.abs() < 1e-12);
        assert_eq!(run.outcome, Outcome::ReachedGoal);
    }
}
