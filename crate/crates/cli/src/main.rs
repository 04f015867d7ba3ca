//! `vtr`: teach, build-map, repeat and eval over files.
//!
//! Exit codes: 0 success, 1 navigation failure, 2 config or format error,
//! 3 I/O error.

mod config;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use thiserror::Error;
use vtr_core::eval::{detect_turns, render, EvalError, RunReport};
use vtr_core::geometry::{Pose2, Transform3};
use vtr_core::perception::{calibrate_scene_sigma, DescriptorProvider, FieldProvider, Observation};
use vtr_core::pipeline::{run_repeat, Outcome, RepeatConfig};
use vtr_core::relpose::{
    BridgeClient, BridgeHandle, BridgeOptions, EstimateFailure, FrameConvention, OracleEstimator, PoseEstimator,
};
use vtr_core::sim::{self, read_trajectory, record_teach, write_trajectory, SimWorld};

use vtr_core::topomap::FRAMES_MAGIC;
use vtr_core::topomap::{self, build_map, build_map_with, FixedIntervalSelector, TopoNode};

use crate::config::{Backend, RunConfig};

const TEACH_NOISE_SALT: u64 = 0x7465_6163_6800_0001;
const REPEAT_NOISE_SALT: u64 = 0x7265_7065_6174_0002;
const ORACLE_SALT: u64 = 0x6f72_6163_6c65_0003;

#[derive(Debug, Parser)]
#[command(name = "vtr", version, about = "Vision-only teach and repeat in a planar simulator")]
struct Cli {
    /// JSON run configuration; every section is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Drive the configured route and record a frame stream.
    Teach {
        #[arg(long)]
        out: PathBuf,
    },
    /// Compress a frame stream into a keyframe map.
    BuildMap {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Node indices to drop after selection, e.g. `3,7`.
        #[arg(long, value_delimiter = ',')]
        delete_nodes: Vec<usize>,
        /// Use a fixed-interval baseline (seconds) instead of the adaptive selector.
        #[arg(long)]
        fixed_interval: Option<f64>,
    },
    /// Repeat a taught route from its map; writes trajectory.csv and cycles.ndjson.
    Repeat {
        #[arg(long)]
        map: PathBuf,
        /// Logs directory (created if its parent exists).
        #[arg(long)]
        out: PathBuf,
        /// Make every pose estimate fail, to exercise the abort path.
        #[arg(long)]
        always_fail: bool,
    },
    /// Score repeat logs against the teach run.
    Eval {
        /// Teach frames file or teach trajectory CSV.
        #[arg(long)]
        teach: PathBuf,
        /// Repeat logs as `[LABEL=]PATH`, PATH being a logs directory or trajectory CSV.
        #[arg(long = "repeat", required = true)]
        repeats: Vec<String>,
        /// Report CSV destination.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Navigation(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Navigation(_) => 1,
            CliError::Config(_) | CliError::Format(_) => 2,
            CliError::Io { .. } => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn format_err(e: impl std::fmt::Display) -> CliError {
    CliError::Format(e.to_string())
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(io_err(path))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_world(cfg: &RunConfig) -> Result<SimWorld, CliError> {
    let world = match (&cfg.world.fixture, &cfg.world.file) {
        (Some(_), Some(_)) => return Err(CliError::Config("world: set either fixture or file, not both".into())),
        (None, None) => return Err(CliError::Config("world: a fixture or a file is required".into())),
        (Some(name), None) => sim::fixture(name).map_err(config_err)?,
        (None, Some(path)) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
    };
    world.validate().map_err(config_err)?;
    Ok(world)
}

fn open_bridge(cfg: &RunConfig) -> Result<Option<BridgeHandle>, CliError> {
    let wanted = cfg.perception.provider == Backend::Bridge || cfg.estimator.uses_bridge();
    if !wanted {
        return Ok(None);
    }
    let b = cfg.bridge.as_ref().ok_or_else(|| CliError::Config("bridge backend selected but no bridge section".into()))?;
    let options = BridgeOptions {
        timeout: Duration::from_millis(b.timeout_ms),
        hello_timeout: Duration::from_millis(b.hello_timeout_ms),
    };
    let client = BridgeClient::spawn_command_line(&b.command, options).map_err(config_err)?;
    Ok(Some(BridgeHandle::new(client)))
}

fn provider(
    cfg: &RunConfig,
    world: &SimWorld,
    bridge: &Option<BridgeHandle>,
    salt: u64,
) -> Result<Box<dyn DescriptorProvider>, CliError> {
    if cfg.perception.provider == Backend::Bridge {
        let handle = bridge.clone().expect("bridge opened for bridge provider");
        return Ok(Box::new(handle));
    }
    let mut field = cfg.perception.field(cfg.seed);
    field.validate().map_err(config_err)?;
    if let Some(target) = cfg.perception.calibrate_similarity {
        field.scene_sigma = calibrate_scene_sigma(&field, target, &world.sample_poses(1.0)).map_err(config_err)?;
    }
    Ok(Box::new(FieldProvider::with_noise_seed(field, cfg.seed ^ salt).map_err(config_err)?))
}

struct AlwaysFail(FrameConvention);

impl PoseEstimator for AlwaysFail {
    fn convention(&self) -> FrameConvention {
        self.0
    }

    fn estimate(&mut self, _: &Observation, _: &TopoNode) -> Result<Transform3, EstimateFailure> {
        Err(EstimateFailure::Spurious)
    }
}

fn cmd_teach(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let world = load_world(cfg)?;
    let bridge = open_bridge(cfg)?;
    let mut p = provider(cfg, &world, &bridge, TEACH_NOISE_SALT)?;
    let rec = record_teach(&world, &cfg.teach, p.as_mut()).map_err(format_err)?;
    let bytes = topomap::serialize_frames(&rec.frames).map_err(format_err)?;
    write(out, bytes)?;
    println!("{} frames -> {}", rec.frames.len(), out.display());
    Ok(())
}

fn cmd_build_map(
    cfg: &RunConfig,
    frames_path: &Path,
    out: &Path,
    delete: &[usize],
    fixed_interval: Option<f64>,
) -> Result<(), CliError> {
    let frames = topomap::deserialize_frames(&read(frames_path)?).map_err(format_err)?;
    let n_frames = frames.len();
    let mut map = match fixed_interval {
        Some(i) => build_map_with(frames, FixedIntervalSelector::new(i).map_err(config_err)?),
        None => build_map(frames, &cfg.selector),
    }
    .map_err(format_err)?;
    if !delete.is_empty() {
        map.delete_nodes(delete).map_err(config_err)?;
    }
    map.metadata.source_frames = n_frames as u64;
    map.metadata.created_unix = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.parse().ok());
    write(out, topomap::serialize(&map).map_err(format_err)?)?;
    println!(
        "{} nodes from {} frames ({:.1}%) -> {}",
        map.len(),
        n_frames,
        100.0 * map.len() as f64 / n_frames.max(1) as f64,
        out.display()
    );
    Ok(())
}

fn cmd_repeat(cfg: &RunConfig, map_path: &Path, out: &Path, always_fail: bool) -> Result<(), CliError> {
    let map = topomap::deserialize(&read(map_path)?).map_err(format_err)?;
    let world = load_world(cfg)?;
    if map.descriptor_dim != cfg.perception.dimension && cfg.perception.provider == Backend::Field {
        return Err(CliError::Config(format!(
            "map descriptors have dimension {} but perception.dimension is {}",
            map.descriptor_dim, cfg.perception.dimension
        )));
    }
    let bridge = open_bridge(cfg)?;
    let mut p = provider(cfg, &world, &bridge, REPEAT_NOISE_SALT)?;
    let mut estimator: Box<dyn PoseEstimator> = if cfg.estimator.uses_bridge() {
        Box::new(bridge.clone().expect("bridge opened for bridge estimator"))
    } else {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ORACLE_SALT);
        Box::new(OracleEstimator::new(cfg.estimator.oracle, rng).map_err(CliError::Config)?)
    };
    if always_fail {
        estimator = Box::new(AlwaysFail(estimator.convention()));
    }
    let rc = RepeatConfig {
        pipeline: cfg.pipeline,
        localization: cfg.localization.clone(),
        gains: cfg.controller,
        start: None,
        reference: None,
    };
    let run = run_repeat(&map, &world, p.as_mut(), estimator.as_mut(), &rc).map_err(config_err)?;

    match fs::create_dir(out) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::AlreadyExists && out.is_dir() => {}
        Err(e) => return Err(io_err(out)(e)),
    }
    let traj_path = out.join("trajectory.csv");
    let file = fs::File::create(&traj_path).map_err(io_err(&traj_path))?;
    write_trajectory(&run.trajectory, io::BufWriter::new(file)).map_err(|e| CliError::Io {
        path: traj_path.clone(),
        source: io::Error::other(e.to_string()),
    })?;
    write(&out.join("cycles.ndjson"), run.cycles_ndjson())?;
    let summary = json!({
        "outcome": &run.outcome,
        "cycles": run.cycles.len(),
        "interventions": run.interventions,
        "collisions": run.collisions,
        "map_nodes": map.len(),
    });
    write(&out.join("outcome.json"), serde_json::to_string_pretty(&summary).expect("json") + "\n")?;

    match run.outcome {
        Outcome::ReachedGoal => {
            println!("reached goal after {} cycles ({} interventions)", run.cycles.len(), run.interventions);
            Ok(())
        }
        Outcome::Aborted(reason) => Err(CliError::Navigation(format!("aborted: {reason}"))),
    }
}

fn load_teach(path: &Path) -> Result<Vec<Pose2>, CliError> {
    let bytes = read(path)?;
    if bytes.starts_with(&FRAMES_MAGIC) {
        let frames = topomap::deserialize_frames(&bytes).map_err(format_err)?;
        frames
            .iter()
            .map(|f| f.teach_pose)
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| CliError::Format("teach frames lack ground-truth poses".into()))
    } else {
        let rows = read_trajectory(bytes.as_slice()).map_err(format_err)?;
        Ok(rows.iter().map(|r| r.pose()).collect())
    }
}

fn label_and_path(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((label, path)) => (label.to_string(), PathBuf::from(path)),
        None => {
            let path = PathBuf::from(arg);
            let label = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| arg.to_string());
            (label, path)
        }
    }
}

fn cmd_eval(cfg: &RunConfig, teach_path: &Path, repeats: &[String], out: Option<&Path>) -> Result<(), CliError> {
    let world = load_world(cfg)?;
    let teach = load_teach(teach_path)?;
    let events = detect_turns(&teach, &cfg.eval.turns);
    let mut reports: Vec<(String, RunReport)> = Vec::new();
    for arg in repeats {
        let (label, path) = label_and_path(arg);
        let (csv_path, summary) = if path.is_dir() {
            (path.join("trajectory.csv"), Some(path.join("outcome.json")))
        } else {
            (path.clone(), None)
        };
        let rows = read_trajectory(read(&csv_path)?.as_slice()).map_err(format_err)?;
        let mut report = vtr_core::eval::score_run(&teach, &rows, &events, &world, &cfg.eval.score).map_err(|e| match e {
            EvalError::Csv(e) => format_err(e),
            other => format_err(other),
        })?;
        if let Some(summary) = summary.filter(|p| p.exists()) {
            let v: serde_json::Value = serde_json::from_slice(&read(&summary)?).map_err(format_err)?;
            report.map_nodes = v.get("map_nodes").and_then(|n| n.as_u64()).map(|n| n as usize);
        }
        reports.push((label, report));
    }
    let table = render(&reports).map_err(format_err)?;
    print!("{}", table.text);
    if let Some(out) = out {
        write(out, table.csv)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli)?;
    if cli.print_config {
        // A closed pipe (e.g. `| head`) is not an error worth reporting.
        let _ = writeln!(io::stdout(), "{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
        return Ok(());
    }
    match &cli.command {
        None => Err(CliError::Config("no command given (see --help)".into())),
        Some(Command::Teach { out }) => cmd_teach(&cfg, out),
        Some(Command::BuildMap { frames, out, delete_nodes, fixed_interval }) => {
            cmd_build_map(&cfg, frames, out, delete_nodes, *fixed_interval)
        }
        Some(Command::Repeat { map, out, always_fail }) => cmd_repeat(&cfg, map, out, *always_fail),
        Some(Command::Eval { teach, repeats, out }) => cmd_eval(&cfg, teach, repeats, out.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vtr: {e}");
            ExitCode::from(e.code())
        }
    }
}
