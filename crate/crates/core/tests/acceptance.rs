//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Expected values are computed
//! here from first principles, not taken from the library under test. The
//! process exits non-zero only if a check cannot run at all; failed criteria
//! are reported, not hidden.

use std::f64::consts::{FRAC_PI_2, PI};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vtr_core::controller::{command, limit_command, raw_command, to_polar, ControlGains, Polar};
use vtr_core::eval::{detect_turns, score_run, ScoreConfig, TurnConfig};
use vtr_core::geometry::{relative_se2, Pose2, RelPose2, Twist};
use vtr_core::localization::{
    init_belief, likelihood_from_similarities, predict, update, LikelihoodConfig, LocalizationConfig, LocalizationMode,
    Localizer, MotionKernel, Prior,
};
use vtr_core::perception::{
    calibrate_scene_sigma, mean_session_similarity, DescriptorProvider, FieldConfig, FieldProvider, Observation,
    Session,
};
use vtr_core::pipeline::{run_repeat, Outcome, RepeatConfig, RepeatRun};
use vtr_core::relpose::{oracle_estimate, project_to_ground, FrameConvention, OracleConfig, OracleEstimator, PoseEstimator};
use vtr_core::sim::{self, record_teach, SimState, SimWorld, TeachConfig};
use vtr_core::topomap::{
    build_map, build_map_with, deserialize, serialize, FixedIntervalSelector, Frame, FormatError, SelectorConfig, TopoMap,
};

type Verdict = (bool, String);
type Check = (&'static str, fn() -> Verdict);

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn wrap(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI { r + 2.0 * PI } else { r }
}

// Controller reference, written out longhand.
fn reference_polar(dx: f64, dy: f64, dpsi: f64) -> (f64, f64, f64) {
    let rho = (dx * dx + dy * dy).sqrt();
    let alpha = dy.atan2(dx);
    (rho, alpha, wrap(dpsi - alpha))
}

fn formula_exactness() -> Verdict {
    let g = ControlGains::default();
    let mut worst: f64 = 0.0;
    let mut track = |got: f64, want: f64| worst = worst.max((got - want).abs());

    let v1 = raw_command(&Polar { rho: 1.0, alpha: 0.0, beta: 0.0 }, &g).v;
    track(v1, 1.4 * (1.0 - (-1.0f64).exp()));

    let w = raw_command(&Polar { rho: 0.5, alpha: 0.3, beta: -0.2 }, &g).w;
    track(w, 2.0 * 0.3 + 0.8 * 0.2);

    for &(dx, dy, dpsi) in &[(1.0, 1.0, FRAC_PI_2), (2.0, -0.5, 0.1), (-0.3, 0.4, -2.5), (0.0, 3.0, 3.0)] {
        let p = to_polar(&RelPose2::new(dx, dy, dpsi));
        let (rho, alpha, beta) = reference_polar(dx, dy, dpsi);
        track(p.rho, rho);
        track(p.alpha, alpha);
        track(p.beta, beta);
    }

    // Full pipeline on a point outside both shaping radii.
    let (dx, dy, dpsi) = (1.0, 0.5, 0.2);
    let (rho, alpha, beta) = reference_polar(dx, dy, dpsi);
    let v_shaped = 1.4 * (1.0 - (-rho).exp()) * alpha.cos().powi(2);
    let w_shaped = 2.0 * alpha - 0.8 * beta;
    let s = (1.4 / v_shaped).min(1.0 / w_shaped.abs()).min(1.0);
    let b = command(&RelPose2::new(dx, dy, dpsi), &g);
    track(b.limited.v, v_shaped * s);
    track(b.limited.w, w_shaped * s);

    // Coordinated scaling keeps curvature.
    for &(v, w, sv, sw) in &[(2.8, 0.5, 1.4, 0.25), (0.7, 3.0, 0.7 / 3.0, 1.0), (-2.1, -1.2, -1.4, -0.8), (1.0, 0.5, 1.0, 0.5)] {
        let t = limit_command(Twist::new(v, w), &g);
        track(t.v, sv);
        track(t.w, sw);
    }
    (worst <= 1e-12, format!("max deviation {worst:.1e} (tol 1e-12)"))
}

fn closed_loop_convergence() -> Verdict {
    let g = ControlGains::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dt = 0.2;
    let start = Instant::now();
    let mut failures = 0;
    let mut slowest: f64 = 0.0;
    for _ in 0..1000 {
        let rho = rng.random_range(0.0..=2.0);
        let alpha = rng.random_range(-FRAC_PI_2..=FRAC_PI_2);
        let dpsi = rng.random_range(-FRAC_PI_2..=FRAC_PI_2);
        let goal = Pose2::new(rho * alpha.cos(), rho * alpha.sin(), dpsi);
        let mut state = SimState::at(Pose2::origin());
        let mut reached = None;
        for k in 0..=150 {
            let xi = relative_se2(&state.pose, &goal);
            if xi.distance() < 0.05 && xi.dpsi.abs() < 0.1 {
                reached = Some(k as f64 * dt);
                break;
            }
            state = sim::step(&state, command(&xi, &g).limited, dt);
        }
        match reached {
            Some(t) => slowest = slowest.max(t),
            None => failures += 1,
        }
    }
    let wall = start.elapsed().as_secs_f64();
    (
        failures == 0 && wall < 10.0,
        format!("{} of 1000 converged, slowest {slowest:.1} s simulated, {wall:.2} s wall", 1000 - failures),
    )
}

struct Scenario {
    world: SimWorld,
    map: TopoMap,
    teach: Vec<Pose2>,
    run: RepeatRun,
    field: FieldConfig,
}

fn scenario(field: FieldConfig) -> Scenario {
    let world = sim::fixture("standard-1km").unwrap();
    let mut provider = FieldProvider::new(field.clone()).unwrap();
    let rec = record_teach(&world, &TeachConfig::default(), &mut provider).unwrap();
    let teach: Vec<Pose2> = rec.trajectory.iter().map(|r| r.pose()).collect();
    let map = build_map(rec.frames, &SelectorConfig::default()).unwrap();
    let mut estimator = OracleEstimator::new(OracleConfig::default(), ChaCha8Rng::seed_from_u64(field.seed)).unwrap();
    let cfg = RepeatConfig { reference: Some(teach.clone()), ..RepeatConfig::default() };
    let run = run_repeat(&map, &world, &mut provider, &mut estimator, &cfg).unwrap();
    Scenario { world, map, teach, run, field }
}

fn calibrated(seed: u64, dimension: usize, world: &SimWorld) -> FieldConfig {
    let mut f = FieldConfig { seed, dimension, ..FieldConfig::default() };
    f.scene_sigma = calibrate_scene_sigma(&f, 0.8, &world.sample_poses(1.0)).unwrap();
    f
}

fn node_error(estimate: usize, truth: Option<usize>) -> usize {
    estimate.abs_diff(truth.expect("simulated runs know the true node"))
}

/// Node-error cycles of a raw-argmax localizer fed the same poses and
/// the same measurement-noise stream as the filtered run.
fn raw_replay_errors(s: &Scenario) -> usize {
    let mut provider = FieldProvider::new(s.field.clone()).unwrap();
    record_teach(&s.world, &TeachConfig::default(), &mut provider).unwrap();
    let cfg = LocalizationConfig { mode: LocalizationMode::RawArgmax, ..LocalizationConfig::default() };
    let mut raw = Localizer::new(cfg, s.map.len()).unwrap();
    s.run
        .trajectory
        .iter()
        .zip(&s.run.cycles)
        .filter(|(row, cycle)| {
            let d = provider.embed(&Observation::simulated(row.pose()), Session::Repeat).unwrap();
            node_error(raw.step(&d, &s.map).unwrap().estimate, cycle.true_node) > 2
        })
        .count()
}

fn zero_noise_route() -> Verdict {
    let start = Instant::now();
    let s = scenario(FieldConfig::default());
    let events = detect_turns(&s.teach, &TurnConfig::default());
    let r = score_run(&s.teach, &s.run.trajectory, &events, &s.world, &ScoreConfig::default()).unwrap();
    let wall = start.elapsed().as_secs_f64();
    let ok = s.run.outcome == Outcome::ReachedGoal
        && r.turns_total == 20
        && r.turns_succeeded == 20
        && r.interventions == 0
        && r.collisions == 0
        && r.max_cross_track < 0.3
        && wall < 60.0;
    (
        ok,
        format!(
            "{:?}, TSR {}, {} interventions, {} collisions, max cross-track {:.3} m, {wall:.1} s wall",
            s.run.outcome,
            r.tsr_label(),
            r.interventions,
            r.collisions,
            r.max_cross_track
        ),
    )
}

const SCENE_DIMENSION: usize = 24;
const SCENE_SEEDS: std::ops::Range<u64> = 0..8;

fn scene_variation() -> Verdict {
    let world = sim::fixture("standard-1km").unwrap();
    let probes = world.sample_poses(1.0);
    let mut ok = true;
    let (mut filtered_bad, mut raw_bad, mut cycles) = (0, 0, 0);
    let mut worst_tsr = 20;
    let mut worst_interventions = 0;
    let mut worst_fraction: f64 = 1.0;
    for seed in SCENE_SEEDS {
        let field = calibrated(seed, SCENE_DIMENSION, &world);
        let similarity = mean_session_similarity(&field, &probes, seed ^ 0x5eed).unwrap();
        let s = scenario(field);
        let events = detect_turns(&s.teach, &TurnConfig::default());
        let r = score_run(&s.teach, &s.run.trajectory, &events, &s.world, &ScoreConfig::default()).unwrap();
        let bad = s.run.cycles.iter().filter(|c| node_error(c.estimate, c.true_node) > 2).count();
        let raw = raw_replay_errors(&s);
        let fraction = 1.0 - bad as f64 / s.run.cycles.len() as f64;
        println!(
            "    seed {seed}: similarity {similarity:.3}, {:?}, TSR {}, {} interventions, node error <= 2 in {:.1}% of cycles, raw argmax errors {raw} vs filtered {bad}",
            s.run.outcome,
            r.tsr_label(),
            r.interventions,
            100.0 * fraction
        );
        ok &= close(similarity, 0.8, 0.05) && fraction >= 0.95 && r.turns_succeeded >= 18 && r.interventions <= 2;
        worst_tsr = worst_tsr.min(r.turns_succeeded);
        worst_interventions = worst_interventions.max(r.interventions);
        worst_fraction = worst_fraction.min(fraction);
        filtered_bad += bad;
        raw_bad += raw;
        cycles += s.run.cycles.len();
    }
    ok &= raw_bad > filtered_bad;
    (
        ok,
        format!(
            "D={SCENE_DIMENSION}, {} seeds: worst TSR {worst_tsr}/20, worst interventions {worst_interventions}, worst in-tolerance {:.1}%; node-error cycles filtered {filtered_bad} vs raw {raw_bad} of {cycles}",
            SCENE_SEEDS.count(),
            100.0 * worst_fraction
        ),
    )
}

/// Raw argmax at the default dimension, reported for context only.
fn scene_variation_default_dimension() -> String {
    let world = sim::fixture("standard-1km").unwrap();
    let s = scenario(calibrated(0, 64, &world));
    let filtered = s.run.cycles.iter().filter(|c| node_error(c.estimate, c.true_node) > 2).count();
    format!(
        "D=64 seed 0: {:?}, node-error cycles filtered {filtered} vs raw {} of {}",
        s.run.outcome,
        raw_replay_errors(&s),
        s.run.cycles.len()
    )
}

fn kidnapped_recovery() -> Verdict {
    let world = sim::fixture("standard-1km").unwrap();
    let mut worst = 0;
    let mut failed = 0;
    let mut trials = 0;
    for seed in 0..4 {
        let mut provider = FieldProvider::new(calibrated(seed, SCENE_DIMENSION, &world)).unwrap();
        let rec = record_teach(&world, &TeachConfig::default(), &mut provider).unwrap();
        let map = build_map(rec.frames, &SelectorConfig::default()).unwrap();
        let poses: Vec<Pose2> = rec.trajectory.iter().map(|r| r.pose()).collect();
        let nodes = map.teach_poses().unwrap();
        let nearest = |p: &Pose2| {
            (0..nodes.len()).min_by(|&a, &b| nodes[a].distance_to(p).total_cmp(&nodes[b].distance_to(p))).unwrap()
        };
        for kidnap_at in [300usize, 1200, 2500, 3800] {
            trials += 1;
            let mut loc = Localizer::new(LocalizationConfig::default(), map.len()).unwrap();
            for p in &poses[..kidnap_at] {
                let d = provider.embed(&Observation::simulated(*p), Session::Repeat).unwrap();
                loc.step(&d, &map).unwrap();
            }
            let target = (nearest(&poses[kidnap_at]) + 30).min(map.len() - 1);
            let mut i = poses.iter().position(|p| nearest(p) == target).unwrap();
            let mut recovered = None;
            for cycle in 1..=200 {
                let d = provider.embed(&Observation::simulated(poses[i]), Session::Repeat).unwrap();
                let est = loc.step(&d, &map).unwrap().estimate;
                if est.abs_diff(nearest(&poses[i])) <= 2 {
                    recovered = Some(cycle);
                    break;
                }
                i = (i + 1).min(poses.len() - 1);
            }
            match recovered {
                Some(c) if c <= 50 => worst = worst.max(c),
                _ => failed += 1,
            }
        }
    }
    (failed == 0, format!("{} of {trials} teleports recovered within 50 cycles, slowest {worst}", trials - failed))
}

fn belief_validity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let kernel = MotionKernel::default();
    let lik = LikelihoodConfig::default();
    let n = 64;
    let mut belief = init_belief(n, Prior::Uniform).unwrap();
    let mut worst_sum: f64 = 0.0;
    let mut negative = 0;
    for i in 0..100_000 {
        if rng.random_bool(0.5) {
            belief = predict(&belief, &kernel);
        } else {
            let sims: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
            belief = update(&belief, &likelihood_from_similarities(&sims, &lik)).unwrap();
        }
        if i % 997 == 0 {
            belief = init_belief(n, Prior::DeltaAt(rng.random_range(0..n))).unwrap();
        }
        worst_sum = worst_sum.max((belief.probs().iter().sum::<f64>() - 1.0).abs());
        negative += belief.probs().iter().filter(|p| p.is_nan() || **p < 0.0).count();
    }
    (worst_sum <= 1e-9 && negative == 0, format!("max |sum-1| {worst_sum:.1e}, {negative} negative entries"))
}

fn compactness_and_format() -> Verdict {
    let world = sim::fixture("standard-1km").unwrap();
    let mut provider = FieldProvider::new(FieldConfig::default()).unwrap();
    let rec = record_teach(&world, &TeachConfig::default(), &mut provider).unwrap();
    let frames = rec.frames.len();
    let map = build_map(rec.frames, &SelectorConfig::default()).unwrap();
    let ratio = map.len() as f64 / frames as f64;

    let bytes = serialize(&map).unwrap();
    let back = deserialize(&bytes).unwrap();
    // Descriptors are stored as f32, so identity is defined on bytes.
    let identical = serialize(&back).unwrap() == bytes && back.len() == map.len();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let flips = 200;
    let detected = (0..flips)
        .filter(|_| {
            let mut corrupt = bytes.clone();
            let at = rng.random_range(8..corrupt.len() - 4);
            corrupt[at] ^= 1 << rng.random_range(0..8);
            matches!(deserialize(&corrupt), Err(FormatError::ChecksumMismatch { .. }))
        })
        .count();
    (
        ratio <= 0.15 && identical && detected == flips,
        format!(
            "{} of {frames} frames kept ({:.1}%), round trip {}, {detected}/{flips} corruptions caught by checksum",
            map.len(),
            100.0 * ratio,
            if identical { "bit-identical" } else { "DIFFERS" }
        ),
    )
}

fn performance_budget() -> Verdict {
    let world = sim::fixture("standard-1km").unwrap();
    let poses: Vec<Pose2> = world.sample_poses(0.5).into_iter().take(2000).collect();
    let field = FieldConfig { scene_sigma: 0.3, measurement_sigma: 0.05, ..FieldConfig::default() };
    let mut provider = FieldProvider::new(field).unwrap();
    let frames: Vec<Frame> = poses
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let obs = Observation::simulated(*p);
            Frame {
                timestamp: i as f64,
                descriptor: provider.embed(&obs, Session::Teach).unwrap(),
                observation: obs.bytes,
                teach_pose: Some(*p),
            }
        })
        .collect();
    let map = build_map_with(frames, FixedIntervalSelector::new(1.0).unwrap()).unwrap();
    let gains = ControlGains::default();
    let mut estimator = OracleEstimator::new(OracleConfig::default(), ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut loc = Localizer::new(LocalizationConfig::default(), map.len()).unwrap();

    let cycles = 2000;
    let mut checksum = 0.0;
    let start = Instant::now();
    for k in 0..cycles {
        let p = poses[k % poses.len()];
        let obs = Observation::simulated(Pose2::new(p.x + 0.1, p.y - 0.1, p.psi + 0.05));
        let d = provider.embed(&obs, Session::Repeat).unwrap();
        let step = loc.propose(&d, &map).unwrap();
        loc.commit(&step);
        if let Ok(t) = estimator.estimate(&obs, &map.nodes[step.subgoal]) {
            let xi = project_to_ground(&t, estimator.convention()).unwrap();
            checksum += command(&xi, &gains).limited.v;
        }
    }
    let rate = cycles as f64 / start.elapsed().as_secs_f64();
    assert!(checksum.is_finite());
    (map.len() == 2000 && rate >= 200.0, format!("{rate:.0} cycles/s over N = {} nodes", map.len()))
}

fn geometry_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = OracleConfig { r_valid: 1e9, ..OracleConfig::default() };
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let mut pose = || Pose2::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-PI..PI));
        let (a, b) = (pose(), pose());
        // Independent reference: rotate the world offset into a's frame.
        let (s, c) = a.psi.sin_cos();
        let (ex, ey) = (b.x - a.x, b.y - a.y);
        let want = RelPose2::new(c * ex + s * ey, -s * ex + c * ey, wrap(b.psi - a.psi));
        let got = project_to_ground(&oracle_estimate(&a, &b, &cfg, &mut rng).unwrap(), FrameConvention::RobotPlanar).unwrap();
        let rel = relative_se2(&a, &b);
        for (x, y) in [(got.dx, want.dx), (got.dy, want.dy), (rel.dx, want.dx), (rel.dy, want.dy)] {
            worst = worst.max((x - y).abs());
        }
        worst = worst.max(wrap(got.dpsi - want.dpsi).abs()).max(wrap(rel.dpsi - want.dpsi).abs());
    }
    (worst <= 1e-9, format!("max deviation {worst:.1e} over 10^4 pairs (tol 1e-9)"))
}

fn main() {
    let criteria: [Check; 9] = [
        ("formula exactness", formula_exactness),
        ("closed-loop convergence", closed_loop_convergence),
        ("noise-free 1 km route", zero_noise_route),
        ("scene-variation robustness", scene_variation),
        ("kidnapped-robot recovery", kidnapped_recovery),
        ("belief validity", belief_validity),
        ("map compactness and format", compactness_and_format),
        ("performance budget", performance_budget),
        ("geometry oracle equivalence", geometry_equivalence),
    ];
    let mut passed = 0;
    for (name, check) in criteria {
        let (ok, detail) = check();
        passed += ok as usize;
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
    println!("INFO scene variation at default dimension: {}", scene_variation_default_dimension());
    println!("{passed}/{} criteria passed", criteria.len());
}
