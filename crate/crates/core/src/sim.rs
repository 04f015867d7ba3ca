//! Planar world with exact unicycle kinematics, teach-run recording and the
//! standard route fixtures.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{limit_command, ControlGains};
use crate::geometry::{wrap_angle, Pose2, Twist};
use crate::perception::{DescriptorProvider, Observation, PerceptionError, Session};
use crate::topomap::Frame;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error("unknown route fixture {0:?}")]
    UnknownFixture(String),
    #[error("invalid teach config: {0}")]
    InvalidConfig(String),
    #[error("perception: {0}")]
    Perception(#[from] PerceptionError),
    #[error("trajectory log: {0}")]
    Csv(#[from] csv::Error),
    #[error("trajectory log is empty")]
    EmptyTrajectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimWorld {
    /// Teach reference polyline; the first waypoint's heading is the start heading.
    pub route: Vec<Pose2>,
    #[serde(default)]
    pub obstacles: Vec<Circle>,
    #[serde(default = "default_halfwidth")]
    pub corridor_halfwidth: f64,
    #[serde(default = "default_robot_radius")]
    pub robot_radius: f64,
}

fn default_halfwidth() -> f64 {
    1.5
}

fn default_robot_radius() -> f64 {
    0.3
}

impl SimWorld {
    pub fn new(route: Vec<Pose2>) -> Result<Self, SimError> {
        let world = Self { route, obstacles: Vec::new(), corridor_halfwidth: default_halfwidth(), robot_radius: default_robot_radius() };
        world.validate()?;
        Ok(world)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.route.len() < 2 {
            return Err(SimError::InvalidWorld(format!("route needs >= 2 waypoints, got {}", self.route.len())));
        }
        if !self.route.iter().all(Pose2::is_finite) {
            return Err(SimError::InvalidWorld("non-finite waypoint".into()));
        }
        if self.obstacles.iter().any(|c| !(c.radius > 0.0 && c.x.is_finite() && c.y.is_finite())) {
            return Err(SimError::InvalidWorld("obstacle radii must be positive".into()));
        }
        if !(self.corridor_halfwidth > 0.0 && self.robot_radius > 0.0) {
            return Err(SimError::InvalidWorld("corridor halfwidth and robot radius must be positive".into()));
        }
        Ok(())
    }

    pub fn polyline(&self) -> Polyline {
        Polyline::new(self.route.iter().map(|p| (p.x, p.y)).collect())
    }

    pub fn start(&self) -> Pose2 {
        self.route[0]
    }

    /// Poses every `spacing` meters along the route, heading along the path.
    pub fn sample_poses(&self, spacing: f64) -> Vec<Pose2> {
        let path = self.polyline();
        let n = (path.length() / spacing).floor() as usize;
        (0..=n)
            .map(|i| {
                let s = i as f64 * spacing;
                let (x, y) = path.point_at(s);
                Pose2::new(x, y, path.heading_at(s))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub pose: Pose2,
    pub time: f64,
    pub odometer: f64,
}

impl SimState {
    pub fn at(pose: Pose2) -> Self {
        Self { pose, time: 0.0, odometer: 0.0 }
    }
}

/// Integrates a constant twist exactly over `dt`.
pub fn step(state: &SimState, cmd: Twist, dt: f64) -> SimState {
    let Pose2 { x, y, psi } = state.pose;
    let (v, w) = (cmd.v, cmd.w);
    let (nx, ny) = if w.abs() < 1e-9 {
        (x + v * psi.cos() * dt, y + v * psi.sin() * dt)
    } else {
        let r = v / w;
        (x + r * ((psi + w * dt).sin() - psi.sin()), y - r * ((psi + w * dt).cos() - psi.cos()))
    };
    SimState {
        pose: Pose2::new(nx, ny, wrap_angle(psi + w * dt)),
        time: state.time + dt,
        odometer: state.odometer + v.abs() * dt,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Contact {
    Clear,
    Collision { obstacle: usize },
}

pub fn check_collision(state: &SimState, world: &SimWorld) -> Contact {
    let (x, y) = (state.pose.x, state.pose.y);
    for (i, c) in world.obstacles.iter().enumerate() {
        if (x - c.x).hypot(y - c.y) < c.radius + world.robot_radius {
            return Contact::Collision { obstacle: i };
        }
    }
    Contact::Clear
}

/// Closest point on a polyline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Arc length of the closest point.
    pub s: f64,
    pub distance: f64,
    pub x: f64,
    pub y: f64,
    /// Direction of the segment containing the closest point.
    pub heading: f64,
}

/// Arc-length parameterized polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    points: Vec<(f64, f64)>,
    arcs: Vec<f64>,
}

impl Polyline {
    pub fn new(points: Vec<(f64, f64)>) -> Self {
        assert!(!points.is_empty(), "polyline needs at least one point");
        let mut arcs = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        arcs.push(0.0);
        for w in points.windows(2) {
            acc += (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1);
            arcs.push(acc);
        }
        Self { points, arcs }
    }

    pub fn from_poses(poses: &[Pose2]) -> Self {
        Self::new(poses.iter().map(|p| (p.x, p.y)).collect())
    }

    pub fn length(&self) -> f64 {
        *self.arcs.last().expect("non-empty")
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn arcs(&self) -> &[f64] {
        &self.arcs
    }

    fn segment_at(&self, s: f64) -> usize {
        if self.points.len() < 2 {
            return 0;
        }
        let i = self.arcs.partition_point(|&a| a <= s);
        i.saturating_sub(1).min(self.points.len() - 2)
    }

    fn segment_heading(&self, i: usize) -> f64 {
        if self.points.len() < 2 {
            return 0.0;
        }
        // zero-length segments borrow the direction of a neighbour
        let mut j = i;
        while j + 1 < self.points.len() {
            let (a, b) = (self.points[j], self.points[j + 1]);
            if a != b {
                return (b.1 - a.1).atan2(b.0 - a.0);
            }
            j += 1;
        }
        let mut j = i.min(self.points.len() - 1);
        while j > 0 {
            let (a, b) = (self.points[j - 1], self.points[j]);
            if a != b {
                return (b.1 - a.1).atan2(b.0 - a.0);
            }
            j -= 1;
        }
        0.0
    }

    pub fn point_at(&self, s: f64) -> (f64, f64) {
        let s = s.clamp(0.0, self.length());
        if self.points.len() < 2 {
            return self.points[0];
        }
        let i = self.segment_at(s);
        let len = self.arcs[i + 1] - self.arcs[i];
        let t = if len > 0.0 { (s - self.arcs[i]) / len } else { 0.0 };
        let (a, b) = (self.points[i], self.points[i + 1]);
        (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1))
    }

    pub fn heading_at(&self, s: f64) -> f64 {
        self.segment_heading(self.segment_at(s.clamp(0.0, self.length())))
    }

    fn project_segment(&self, i: usize, x: f64, y: f64) -> Projection {
        let (a, b) = (self.points[i], self.points[i + 1]);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 { (((x - a.0) * dx + (y - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let (px, py) = (a.0 + t * dx, a.1 + t * dy);
        Projection {
            s: self.arcs[i] + t * len2.sqrt(),
            distance: (x - px).hypot(y - py),
            x: px,
            y: py,
            heading: self.segment_heading(i),
        }
    }

    /// Globally closest point; ties go to the smaller arc length.
    pub fn project(&self, x: f64, y: f64) -> Projection {
        self.project_within(x, y, 0.0, self.length())
    }

    /// Closest point restricted to arc lengths in `[s_lo, s_hi]` (segment granularity).
    pub fn project_within(&self, x: f64, y: f64, s_lo: f64, s_hi: f64) -> Projection {
        if self.points.len() < 2 {
            let p = self.points[0];
            return Projection { s: 0.0, distance: (x - p.0).hypot(y - p.1), x: p.0, y: p.1, heading: 0.0 };
        }
        let lo = self.segment_at(s_lo.max(0.0));
        let hi = self.segment_at(s_hi.min(self.length()));
        let mut best = self.project_segment(lo, x, y);
        for i in lo + 1..=hi {
            let p = self.project_segment(i, x, y);
            if p.distance < best.distance {
                best = p;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeachConfig {
    /// Cruise speed, m/s.
    pub speed: f64,
    /// Frame rate, Hz.
    pub camera_rate: f64,
    /// Pure-pursuit lookahead, meters.
    pub lookahead: f64,
    pub w_max: f64,
}

impl Default for TeachConfig {
    fn default() -> Self {
        Self { speed: 1.0, camera_rate: 5.0, lookahead: 1.5, w_max: 1.0 }
    }
}

impl TeachConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let ok = [self.speed, self.camera_rate, self.lookahead, self.w_max].iter().all(|v| v.is_finite() && *v > 0.0);
        if ok {
            Ok(())
        } else {
            Err(SimError::InvalidConfig("speed, camera_rate, lookahead and w_max must be positive".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeachRecording {
    pub frames: Vec<Frame>,
    pub trajectory: Vec<TrajectoryRow>,
}

/// Drives the route with pure pursuit and captures one frame per camera tick.
pub fn record_teach(world: &SimWorld, config: &TeachConfig, provider: &mut dyn DescriptorProvider) -> Result<TeachRecording, SimError> {
    world.validate()?;
    config.validate()?;
    let path = world.polyline();
    let total = path.length();
    let dt = 1.0 / config.camera_rate;
    let limits = ControlGains { v_max: config.speed, w_max: config.w_max, ..ControlGains::default() };
    let mut state = SimState::at(world.start());
    let mut s = 0.0;
    let mut frames = Vec::new();
    let mut trajectory = Vec::new();
    // generous cap: the route length at a tenth of cruise speed
    let max_ticks = ((total / config.speed) * config.camera_rate * 10.0) as usize + 100;

    for tick in 0..max_ticks {
        let pose = state.pose;
        let proj = path.project_within(pose.x, pose.y, s - 1.0, s + config.lookahead + 3.0);
        s = s.max(proj.s);
        let end = path.point_at(total);
        let to_end = (end.0 - pose.x).hypot(end.1 - pose.y);
        let remaining = (total - s).max(0.0);
        let done = remaining <= 1e-6 || to_end <= 1e-3;

        let cmd = if done {
            Twist::zero()
        } else {
            let target = path.point_at(s + config.lookahead);
            let (dx, dy) = (target.0 - pose.x, target.1 - pose.y);
            let (c, si) = (pose.psi.cos(), pose.psi.sin());
            let (lx, ly) = (c * dx + si * dy, -si * dx + c * dy);
            let d2 = (lx * lx + ly * ly).max(1e-12);
            let v = config.speed.min(to_end / dt);
            limit_command(Twist::new(v, v * 2.0 * ly / d2), &limits)
        };

        let obs = Observation::simulated(pose);
        let descriptor = provider.embed(&obs, Session::Teach)?;
        frames.push(Frame { timestamp: tick as f64 * dt, descriptor, observation: obs.bytes, teach_pose: Some(pose) });
        trajectory.push(TrajectoryRow::new(state.time, pose, cmd, None, RowMode::Teach));
        if done {
            break;
        }
        state = step(&state, cmd, dt);
    }
    Ok(TeachRecording { frames, trajectory })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowMode {
    Teach,
    Track,
    /// Estimator failed; the previous command is held at reduced speed.
    Hold,
    /// The pose of this row results from a guidance reset.
    Intervention,
}

/// One control cycle in the trajectory CSV (`t,x,y,psi,v,w,subgoal,mode`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v: f64,
    pub w: f64,
    pub subgoal: Option<usize>,
    pub mode: RowMode,
}

impl TrajectoryRow {
    pub fn new(t: f64, pose: Pose2, cmd: Twist, subgoal: Option<usize>, mode: RowMode) -> Self {
        Self { t, x: pose.x, y: pose.y, psi: pose.psi, v: cmd.v, w: cmd.w, subgoal, mode }
    }

    pub fn pose(&self) -> Pose2 {
        Pose2::new(self.x, self.y, self.psi)
    }
}

pub fn write_trajectory<W: Write>(rows: &[TrajectoryRow], out: W) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    if rows.is_empty() {
        w.write_record(["t", "x", "y", "psi", "v", "w", "subgoal", "mode"])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_trajectory<R: Read>(input: R) -> Result<Vec<TrajectoryRow>, SimError> {
    let mut r = csv::Reader::from_reader(input);
    let rows = r.deserialize().collect::<Result<Vec<TrajectoryRow>, _>>()?;
    Ok(rows)
}

/// Fixed seed of the long fixture.
pub const STANDARD_1KM_SEED: u64 = 20_240_601;
pub const FIXTURE_NAMES: [&str; 2] = ["standard-1km", "standard-short"];

pub fn fixture(name: &str) -> Result<SimWorld, SimError> {
    match name {
        "standard-1km" => Ok(standard_1km()),
        "standard-short" => Ok(standard_short()),
        other => Err(SimError::UnknownFixture(other.to_string())),
    }
}

fn polyline_from_legs(legs: &[f64], turns_deg: &[f64]) -> Vec<(f64, f64)> {
    let mut pts = vec![(0.0, 0.0)];
    let mut h: f64 = 0.0;
    for (i, len) in legs.iter().enumerate() {
        let &(x, y) = pts.last().expect("non-empty");
        pts.push((x + len * h.cos(), y + len * h.sin()));
        if let Some(t) = turns_deg.get(i) {
            h += t.to_radians();
        }
    }
    pts
}

fn segment_distance(a: (f64, f64), b: (f64, f64), c: (f64, f64), d: (f64, f64)) -> f64 {
    let line = Polyline::new(vec![c, d]);
    let other = Polyline::new(vec![a, b]);
    let cross = |p: (f64, f64), q: (f64, f64), r: (f64, f64)| (q.0 - p.0) * (r.1 - p.1) - (q.1 - p.1) * (r.0 - p.0);
    let intersects = cross(a, b, c) * cross(a, b, d) < 0.0 && cross(c, d, a) * cross(c, d, b) < 0.0;
    if intersects {
        return 0.0;
    }
    line.project(a.0, a.1)
        .distance
        .min(line.project(b.0, b.1).distance)
        .min(other.project(c.0, c.1).distance)
        .min(other.project(d.0, d.1).distance)
}

fn min_nonadjacent_separation(pts: &[(f64, f64)]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..pts.len() - 1 {
        for j in i + 2..pts.len() - 1 {
            best = best.min(segment_distance(pts[i], pts[i + 1], pts[j], pts[j + 1]));
        }
    }
    best
}

fn to_world(pts: Vec<(f64, f64)>, obstacle_offset: f64, obstacle_radius: f64) -> SimWorld {
    let mut route = Vec::with_capacity(pts.len());
    for (i, &(x, y)) in pts.iter().enumerate() {
        let j = i.min(pts.len() - 2);
        let h = (pts[j + 1].1 - pts[j].1).atan2(pts[j + 1].0 - pts[j].0);
        route.push(Pose2::new(x, y, h));
    }
    // one obstacle beside the middle of every leg, alternating sides
    let mut obstacles = Vec::new();
    for (i, w) in pts.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        let h = (b.1 - a.1).atan2(b.0 - a.0);
        let side = if i % 2 == 0 { 1.0 } else { -1.0 };
        let (mx, my) = ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0);
        obstacles.push(Circle {
            x: mx - side * obstacle_offset * h.sin(),
            y: my + side * obstacle_offset * h.cos(),
            radius: obstacle_radius,
        });
    }
    SimWorld { route, obstacles, corridor_halfwidth: default_halfwidth(), robot_radius: default_robot_radius() }
}

/// 1000 m, 21 legs of at least 10 m joined by 20 right-angle turns of random sign.
pub fn standard_1km() -> SimWorld {
    const LEGS: usize = 21;
    const TOTAL: f64 = 1000.0;
    const MIN_LEG: f64 = 10.0;
    const MIN_SEPARATION: f64 = 8.0;
    for attempt in 0u64.. {
        let mut rng = ChaCha8Rng::seed_from_u64(STANDARD_1KM_SEED.wrapping_add(attempt));
        let weights: Vec<f64> = (0..LEGS).map(|_| rng.random_range(0.2..1.0)).collect();
        let wsum: f64 = weights.iter().sum();
        let legs: Vec<f64> = weights.iter().map(|w| MIN_LEG + (TOTAL - MIN_LEG * LEGS as f64) * w / wsum).collect();
        let turns: Vec<f64> = (0..LEGS - 1).map(|_| if rng.random::<bool>() { 90.0 } else { -90.0 }).collect();
        let pts = polyline_from_legs(&legs, &turns);
        if min_nonadjacent_separation(&pts) >= MIN_SEPARATION {
            return to_world(pts, 2.3, 0.4);
        }
    }
    unreachable!("the attempt loop is unbounded")
}

/// 100 m with 7 turns, two of them sharper than 120 degrees.
pub fn standard_short() -> SimWorld {
    let legs = [14.0, 12.0, 13.0, 11.0, 12.0, 14.0, 12.0, 12.0];
    let turns = [90.0, -90.0, 135.0, -90.0, 90.0, -130.0, 90.0];
    to_world(polyline_from_legs(&legs, &turns), 2.3, 0.4)
}
