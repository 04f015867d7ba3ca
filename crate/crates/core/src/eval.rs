//! Run scoring: turn success, interventions, collisions, time, distance and
//! cross-track error, plus side-by-side comparison tables.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrap_angle, Pose2};
use crate::sim::{check_collision, Contact, Polyline, RowMode, SimState, SimWorld, TrajectoryRow};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0} trajectory is empty")]
    EmptyTrajectory(&'static str),
    #[error("fixtures do not match: {0}")]
    Mismatch(String),
    #[error("comparison needs at least 2 reports, got {0}")]
    TooFewReports(usize),
    #[error("report csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TurnConfig {
    /// Heading change over one window that marks a turn, radians.
    pub threshold: f64,
    /// Arc-length window, meters.
    pub window: f64,
    /// Half length of the entry/exit gates, meters.
    pub gate_halfwidth: f64,
}

impl Default for TurnConfig {
    fn default() -> Self {
        Self { threshold: 0.52, window: 2.0, gate_halfwidth: 1.5 }
    }
}

/// Line segment across the teach path, perpendicular to its heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Gate {
    pub s: f64,
    pub x: f64,
    pub y: f64,
    /// Teach heading at the gate; crossings must go this way.
    pub heading: f64,
    pub halfwidth: f64,
}

impl Gate {
    fn at(pose: &Pose2, s: f64, halfwidth: f64) -> Self {
        Self { s, x: pose.x, y: pose.y, heading: pose.psi, halfwidth }
    }

    /// Whether the step `a -> b` crosses the gate forwards.
    pub fn crossed_by(&self, a: (f64, f64), b: (f64, f64)) -> bool {
        let (c, s) = (self.heading.cos(), self.heading.sin());
        // along-track and lateral coordinates in the gate frame
        let along = |p: (f64, f64)| c * (p.0 - self.x) + s * (p.1 - self.y);
        let lateral = |p: (f64, f64)| -s * (p.0 - self.x) + c * (p.1 - self.y);
        let (ua, ub) = (along(a), along(b));
        if !(ua < 0.0 && ub >= 0.0) {
            return false;
        }
        let t = ua / (ua - ub);
        let lat = lateral(a) + t * (lateral(b) - lateral(a));
        lat.abs() <= self.halfwidth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TurnEvent {
    /// Teach arc length of the sharpest sample.
    pub s: f64,
    /// Signed heading change across the event, radians.
    pub angle: f64,
    pub entry: Gate,
    pub exit: Gate,
}

fn arc_lengths(poses: &[Pose2]) -> Vec<f64> {
    let mut s = Vec::with_capacity(poses.len());
    let mut acc = 0.0;
    for (i, p) in poses.iter().enumerate() {
        if i > 0 {
            acc += p.distance_to(&poses[i - 1]);
        }
        s.push(acc);
    }
    s
}

/// A turn is any stretch where the heading changes by more than the threshold
/// within one arc-length window; overlapping windows merge into one event.
pub fn detect_turns(teach: &[Pose2], config: &TurnConfig) -> Vec<TurnEvent> {
    if teach.len() < 2 {
        return Vec::new();
    }
    let s = arc_lengths(teach);
    let dpsi: Vec<f64> = teach.windows(2).map(|w| wrap_angle(w[1].psi - w[0].psi)).collect();

    // flag the samples covered by every window that exceeds the threshold
    let mut flagged = vec![false; teach.len()];
    let mut j = 0;
    let mut acc = 0.0;
    for i in 0..teach.len() - 1 {
        if j < i {
            j = i;
            acc = 0.0;
        }
        while j + 1 < teach.len() && s[j + 1] - s[i] <= config.window {
            acc += dpsi[j];
            j += 1;
        }
        if acc.abs() > config.threshold {
            flagged[i..=j].iter_mut().for_each(|f| *f = true);
        }
        if j > i {
            acc -= dpsi[i];
        }
    }

    let mut events = Vec::new();
    let mut i = 0;
    while i < teach.len() {
        if !flagged[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i + 1 < teach.len() && flagged[i + 1] {
            i += 1;
        }
        let end = i;
        let angle: f64 = dpsi[start..end].iter().sum();
        if angle.abs() >= config.threshold {
            let sharpest = (start..end)
                .max_by(|&a, &b| {
                    let ka = dpsi[a].abs() / (s[a + 1] - s[a]).max(1e-9);
                    let kb = dpsi[b].abs() / (s[b + 1] - s[b]).max(1e-9);
                    ka.total_cmp(&kb)
                })
                .unwrap_or(start);
            events.push(TurnEvent {
                s: s[sharpest],
                angle,
                entry: Gate::at(&teach[start], s[start], config.gate_halfwidth),
                exit: Gate::at(&teach[end], s[end], config.gate_halfwidth),
            });
        }
        i += 1;
    }
    events
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    /// Cross-track error that counts as a guidance intervention, meters.
    pub intervention_threshold: f64,
    /// Repeat runs starting further than this from the teach path are rejected, meters.
    pub max_start_offset: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self { intervention_threshold: 1.5, max_start_offset: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub turns_succeeded: usize,
    pub turns_total: usize,
    pub tsr: f64,
    pub collisions: usize,
    pub interventions: usize,
    pub duration: f64,
    pub distance: f64,
    pub max_cross_track: f64,
    pub mean_cross_track: f64,
    pub map_nodes: Option<usize>,
}

impl RunReport {
    pub fn tsr_label(&self) -> String {
        format!("{}/{} ({:.0}%)", self.turns_succeeded, self.turns_total, 100.0 * self.tsr)
    }
}

/// Scores a repeat log against the teach path.
///
/// Rows logged with [`RowMode::Intervention`] were already reset by the loop.
/// Any other row further than the threshold from the teach path counts as an
/// intervention too, and the rest of the log is shifted by the reset offset as
/// if the robot had been put back on the path there.
pub fn score_run(
    teach: &[Pose2],
    repeat: &[TrajectoryRow],
    events: &[TurnEvent],
    world: &SimWorld,
    config: &ScoreConfig,
) -> Result<RunReport, EvalError> {
    if teach.is_empty() {
        return Err(EvalError::EmptyTrajectory("teach"));
    }
    if repeat.is_empty() {
        return Err(EvalError::EmptyTrajectory("repeat"));
    }
    let path = Polyline::from_poses(teach);
    if let Some(e) = events.iter().find(|e| e.exit.s > path.length() + 1e-6) {
        return Err(EvalError::Mismatch(format!("turn at {:.1} m lies beyond the {:.1} m teach path", e.s, path.length())));
    }
    let first = path.project(repeat[0].x, repeat[0].y);
    if first.distance > config.max_start_offset {
        return Err(EvalError::Mismatch(format!("repeat starts {:.1} m from the teach path", first.distance)));
    }

    let mut offset = (0.0, 0.0);
    let mut effective = Vec::with_capacity(repeat.len());
    let mut jump = vec![false; repeat.len()];
    let mut reset_arcs = Vec::new();
    let mut xt_sum = 0.0;
    let mut xt_max: f64 = 0.0;
    for (i, row) in repeat.iter().enumerate() {
        if row.mode == RowMode::Intervention {
            offset = (0.0, 0.0);
            jump[i] = true;
        }
        let mut p = (row.x + offset.0, row.y + offset.1);
        let mut proj = path.project(p.0, p.1);
        if row.mode == RowMode::Intervention {
            reset_arcs.push(proj.s);
        } else if proj.distance > config.intervention_threshold {
            offset = (offset.0 + proj.x - p.0, offset.1 + proj.y - p.1);
            p = (proj.x, proj.y);
            reset_arcs.push(proj.s);
            jump[i] = true;
            proj.distance = 0.0;
        }
        xt_sum += proj.distance;
        xt_max = xt_max.max(proj.distance);
        effective.push((p, row.psi));
    }

    let mut collisions = 0;
    let mut inside = false;
    for &((x, y), psi) in &effective {
        let hit = matches!(check_collision(&SimState::at(Pose2::new(x, y, psi)), world), Contact::Collision { .. });
        if hit && !inside {
            collisions += 1;
        }
        inside = hit;
    }

    let mut distance = 0.0;
    for i in 1..effective.len() {
        if !jump[i] {
            let (a, b) = (effective[i - 1].0, effective[i].0);
            distance += (b.0 - a.0).hypot(b.1 - a.1);
        }
    }

    let succeeded = events
        .iter()
        .filter(|e| {
            let clean = !reset_arcs.iter().any(|&s| s >= e.entry.s && s <= e.exit.s + e.exit.halfwidth);
            let crossed = (1..effective.len()).any(|i| !jump[i] && e.exit.crossed_by(effective[i - 1].0, effective[i].0));
            clean && crossed
        })
        .count();
    let total = events.len();

    Ok(RunReport {
        turns_succeeded: succeeded,
        turns_total: total,
        tsr: if total == 0 { 1.0 } else { succeeded as f64 / total as f64 },
        collisions,
        interventions: reset_arcs.len(),
        duration: repeat[repeat.len() - 1].t - repeat[0].t,
        distance,
        max_cross_track: xt_max,
        mean_cross_track: xt_sum / repeat.len() as f64,
        map_nodes: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub text: String,
    pub csv: String,
}

const COLUMNS: [&str; 9] = ["label", "tsr", "collisions", "interventions", "time_s", "distance_m", "max_xt_m", "mean_xt_m", "nodes"];

fn row_cells(label: &str, r: &RunReport) -> [String; 9] {
    [
        label.to_string(),
        r.tsr_label(),
        r.collisions.to_string(),
        r.interventions.to_string(),
        format!("{:.1}", r.duration),
        format!("{:.1}", r.distance),
        format!("{:.3}", r.max_cross_track),
        format!("{:.3}", r.mean_cross_track),
        r.map_nodes.map_or_else(|| "-".to_string(), |n| n.to_string()),
    ]
}

/// Side-by-side table of at least two labelled reports.
pub fn compare(reports: &[(String, RunReport)]) -> Result<Comparison, EvalError> {
    if reports.len() < 2 {
        return Err(EvalError::TooFewReports(reports.len()));
    }
    render(reports)
}

/// Same table as [`compare`] without the two-report minimum.
pub fn render(reports: &[(String, RunReport)]) -> Result<Comparison, EvalError> {
    let rows: Vec<[String; 9]> = reports.iter().map(|(l, r)| row_cells(l, r)).collect();
    let mut widths = COLUMNS.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut text = String::new();
    let mut line = |cells: &[String]| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        text.push_str(padded.join("  ").trim_end());
        text.push('\n');
    };
    line(&COLUMNS.map(str::to_string));
    for row in &rows {
        line(row);
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "label",
        "turns_succeeded",
        "turns_total",
        "tsr",
        "collisions",
        "interventions",
        "duration_s",
        "distance_m",
        "max_cross_track_m",
        "mean_cross_track_m",
        "map_nodes",
    ])?;
    for (label, r) in reports {
        w.write_record([
            label.clone(),
            r.turns_succeeded.to_string(),
            r.turns_total.to_string(),
            r.tsr.to_string(),
            r.collisions.to_string(),
            r.interventions.to_string(),
            r.duration.to_string(),
            r.distance.to_string(),
            r.max_cross_track.to_string(),
            r.mean_cross_track.to_string(),
            r.map_nodes.map(|n| n.to_string()).unwrap_or_default(),
        ])?;
    }
    let csv = String::from_utf8(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?).expect("csv output is utf-8");
    Ok(Comparison { text, csv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Twist;
    use std::f64::consts::FRAC_PI_2;

    fn straight(n: usize, step: f64) -> Vec<Pose2> {
        (0..n).map(|i| Pose2::new(i as f64 * step, 0.0, 0.0)).collect()
    }

    /// 20 m east, a quarter circle of radius 1 m, then 20 m north.
    fn l_shape() -> Vec<Pose2> {
        let mut out: Vec<Pose2> = (0..=100).map(|i| Pose2::new(i as f64 * 0.2, 0.0, 0.0)).collect();
        for k in 1..=8 {
            let th = k as f64 * FRAC_PI_2 / 8.0;
            out.push(Pose2::new(20.0 + th.sin(), 1.0 - th.cos(), th));
        }
        for i in 1..=100 {
            out.push(Pose2::new(21.0, 1.0 + i as f64 * 0.2, FRAC_PI_2));
        }
        out
    }

    fn rows(poses: &[Pose2]) -> Vec<TrajectoryRow> {
        poses
            .iter()
            .enumerate()
            .map(|(i, p)| TrajectoryRow::new(i as f64 * 0.2, *p, Twist::new(1.0, 0.0), Some(0), RowMode::Track))
            .collect()
    }

    fn world_for(poses: &[Pose2]) -> SimWorld {
        SimWorld::new(poses.to_vec()).unwrap()
    }

    #[test]
    fn straight_has_no_turns() {
        assert!(detect_turns(&straight(200, 0.2), &TurnConfig::default()).is_empty());
        assert!(detect_turns(&straight(1, 0.2), &TurnConfig::default()).is_empty());
    }

    #[test]
    fn single_corner_is_one_event() {
        let events = detect_turns(&l_shape(), &TurnConfig::default());
        assert_eq!(events.len(), 1);
        let e = events[0];
        assert!((e.angle - FRAC_PI_2).abs() < 1e-9, "{}", e.angle);
        assert!(e.s > 19.0 && e.s < 22.0);
        assert!(e.entry.s < e.s && e.exit.s > e.s);
    }

    #[test]
    fn gentle_curve_is_not_a_turn() {
        // 20 degrees spread over 10 m never exceeds 30 degrees per 2 m
        let poses: Vec<Pose2> = (0..=50).map(|i| {
            let th = (i as f64 / 50.0) * 20f64.to_radians();
            Pose2::new(i as f64 * 0.2, 0.0, th)
        }).collect();
        assert!(detect_turns(&poses, &TurnConfig::default()).is_empty());
    }

    #[test]
    fn identity_run_scores_perfectly() {
        let teach = l_shape();
        let events = detect_turns(&teach, &TurnConfig::default());
        let r = score_run(&teach, &rows(&teach), &events, &world_for(&teach), &ScoreConfig::default()).unwrap();
        assert_eq!((r.turns_succeeded, r.turns_total, r.tsr), (1, 1, 1.0));
        assert_eq!((r.collisions, r.interventions), (0, 0));
        assert_eq!(r.max_cross_track, 0.0);
        let length = Polyline::from_poses(&teach).length();
        assert!((r.distance - length).abs() < 1e-9);
    }

    #[test]
    fn lateral_offset_triggers_interventions() {
        let teach = straight(100, 0.2);
        let shifted: Vec<Pose2> = teach.iter().map(|p| Pose2::new(p.x, p.y + 2.0, p.psi)).collect();
        let rep = rows(&shifted);
        let r = score_run(&teach, &rep, &[], &world_for(&teach), &ScoreConfig::default()).unwrap();
        assert!(r.interventions > 0);
        assert!(r.max_cross_track <= 1.5);
    }

    #[test]
    fn marked_interventions_are_counted_and_fail_the_turn() {
        let teach = l_shape();
        let events = detect_turns(&teach, &TurnConfig::default());
        let mut rep = rows(&teach);
        let idx = rep.iter().position(|r| r.x >= 20.4).unwrap();
        rep[idx].mode = RowMode::Intervention;
        let r = score_run(&teach, &rep, &events, &world_for(&teach), &ScoreConfig::default()).unwrap();
        assert_eq!(r.interventions, 1);
        assert_eq!(r.turns_succeeded, 0);
    }

    #[test]
    fn cutting_the_corner_wide_misses_the_gate() {
        let teach = l_shape();
        let events = detect_turns(&teach, &TurnConfig::default());
        // runs east past the corner and never turns
        let rep = rows(&straight(130, 0.2));
        let r = score_run(&teach, &rep, &events, &world_for(&teach), &ScoreConfig { max_start_offset: 5.0, ..Default::default() }).unwrap();
        assert_eq!(r.turns_succeeded, 0);
    }

    #[test]
    fn collisions_count_entries() {
        let teach = straight(100, 0.2);
        let mut world = world_for(&teach);
        world.obstacles.push(crate::sim::Circle { x: 10.0, y: 0.5, radius: 0.5 });
        let r = score_run(&teach, &rows(&teach), &[], &world, &ScoreConfig::default()).unwrap();
        assert_eq!(r.collisions, 1);
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let teach = straight(10, 0.2);
        let far: Vec<Pose2> = teach.iter().map(|p| Pose2::new(p.x + 100.0, p.y, p.psi)).collect();
        let w = world_for(&teach);
        assert!(matches!(score_run(&teach, &rows(&far), &[], &w, &ScoreConfig::default()), Err(EvalError::Mismatch(_))));
        let events = detect_turns(&l_shape(), &TurnConfig::default());
        assert!(matches!(score_run(&teach, &rows(&teach), &events, &w, &ScoreConfig::default()), Err(EvalError::Mismatch(_))));
        assert!(matches!(score_run(&[], &rows(&teach), &[], &w, &ScoreConfig::default()), Err(EvalError::EmptyTrajectory(_))));
    }

    #[test]
    fn comparison_tables() {
        let teach = l_shape();
        let events = detect_turns(&teach, &TurnConfig::default());
        let r = score_run(&teach, &rows(&teach), &events, &world_for(&teach), &ScoreConfig::default()).unwrap();
        let cmp = compare(&[("a".into(), r.clone()), ("b".into(), r.clone())]).unwrap();
        let lines: Vec<&str> = cmp.text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1][1..], lines[2][1..]);
        let csv_lines: Vec<&str> = cmp.csv.lines().collect();
        assert_eq!(csv_lines.len(), 3);
        assert_eq!(csv_lines[1][1..], csv_lines[2][1..]);
        assert!(compare(&[("a".into(), r)]).is_err());
    }
}
