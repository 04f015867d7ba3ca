//! Reference bridge server for conformance tests and demos.
//!
//! Simulator pose tokens are embedded with the default appearance field and
//! related by their exact planar offset. Any other bytes hash to a unit
//! vector, and relpose between two opaque images only succeeds when the
//! images are identical.

use std::io::{self, BufRead, Write};
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use clap::Parser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use vtr_core::geometry::{relative_se2, RelPose2};
use vtr_core::perception::{parse_pose_token, FieldConfig, FieldProvider, Session};
use vtr_core::relpose::FrameConvention;

#[derive(Debug, Parser)]
#[command(name = "vtr-echo-bridge", about = "Echo bridge speaking the newline-JSON protocol")]
struct Args {
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Appearance field seed for pose tokens.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "robot-planar")]
    convention: Convention,
    /// Delay before every embed/relpose reply.
    #[arg(long, default_value_t = 0)]
    delay_ms: u64,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum Convention {
    RobotPlanar,
    CameraOptical,
}

impl Convention {
    fn wire(self) -> FrameConvention {
        match self {
            Convention::RobotPlanar => FrameConvention::RobotPlanar,
            Convention::CameraOptical => FrameConvention::CameraOptical,
        }
    }
}

/// FNV-1a, stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn hashed_unit(bytes: &[u8], dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(bytes));
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Row-major rotation and translation of `rel` in the given convention.
fn wire_transform(rel: &RelPose2, convention: Convention) -> ([f64; 9], [f64; 3]) {
    let (s, c) = rel.dpsi.sin_cos();
    match convention {
        Convention::RobotPlanar => ([c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0], [rel.dx, rel.dy, 0.0]),
        // Yaw about robot z is a rotation by −dpsi about the camera y axis.
        Convention::CameraOptical => ([c, 0.0, -s, 0.0, 1.0, 0.0, s, 0.0, c], [-rel.dy, 0.0, rel.dx]),
    }
}

struct Server {
    args: Args,
    field: FieldProvider,
}

impl Server {
    fn decode(req: &Value, key: &str) -> Result<Vec<u8>, String> {
        let text = req.get(key).and_then(Value::as_str).ok_or_else(|| format!("missing {key}"))?;
        B64.decode(text).map_err(|e| format!("{key}: {e}"))
    }

    fn handle(&mut self, req: &Value) -> Result<Value, String> {
        match req.get("op").and_then(Value::as_str) {
            Some("hello") => Ok(json!({
                "descriptor_dim": self.args.dim,
                "frame_convention": self.args.convention.wire(),
                "models": {"embed": "echo-field", "relpose": "echo-token"},
                "protocol": 1,
                "translation_scale": "metric",
            })),
            Some("embed") => {
                let image = Self::decode(req, "image_b64")?;
                let descriptor = match parse_pose_token(&image) {
                    Some(pose) => self.field.embed_pose(&pose, Session::Teach).values().to_vec(),
                    None => hashed_unit(&image, self.args.dim),
                };
                Ok(json!({ "descriptor": descriptor }))
            }
            Some("relpose") => {
                let a = Self::decode(req, "image_a_b64")?;
                let b = Self::decode(req, "image_b_b64")?;
                let rel = if a == b {
                    RelPose2::identity()
                } else {
                    match (parse_pose_token(&a), parse_pose_token(&b)) {
                        (Some(pa), Some(pb)) => relative_se2(&pa, &pb),
                        _ => return Err("no correspondences".into()),
                    }
                };
                let (rotation, translation) = wire_transform(&rel, self.args.convention);
                Ok(json!({ "rotation": rotation, "translation": translation }))
            }
            _ => Err("unknown op".into()),
        }
    }
}

fn main() -> io::Result<()> {
    let args = Args::parse();
    let field_cfg = FieldConfig { dimension: args.dim, seed: args.seed, ..FieldConfig::default() };
    let field = match FieldProvider::new(field_cfg) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("vtr-echo-bridge: {e}");
            std::process::exit(2);
        }
    };
    let mut server = Server { args, field };
    let stdin = io::stdin();
    let mut stdout = io::stdout().lock();
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Value>(&line) {
            Ok(req) => {
                let id = req.get("id").cloned().unwrap_or(Value::from(-1));
                if server.args.delay_ms > 0 && req.get("op").and_then(Value::as_str) != Some("hello") {
                    thread::sleep(Duration::from_millis(server.args.delay_ms));
                }
                let mut body = server.handle(&req).unwrap_or_else(|e| json!({ "error": e }));
                body["id"] = id;
                body
            }
            Err(_) => json!({"id": -1, "error": "unparseable request"}),
        };
        writeln!(stdout, "{reply}")?;
        stdout.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use vtr_core::geometry::Transform3;
    use vtr_core::relpose::project_to_ground;

    #[test]
    fn both_conventions_project_back_to_the_planar_offset() {
        let rel = RelPose2::new(1.5, -0.4, 0.7);
        for conv in [Convention::RobotPlanar, Convention::CameraOptical] {
            let (r, t) = wire_transform(&rel, conv);
            let back = project_to_ground(&Transform3::from_rows(r, t).unwrap(), conv.wire()).unwrap();
            assert!((back.dx - rel.dx).abs() < 1e-12, "{conv:?}");
            assert!((back.dy - rel.dy).abs() < 1e-12, "{conv:?}");
            assert!((back.dpsi - rel.dpsi).abs() < 1e-12, "{conv:?}");
        }
    }

    #[test]
    fn hashed_descriptors_are_unit_and_stable() {
        let a = hashed_unit(b"jpeg bytes", 16);
        assert_eq!(a, hashed_unit(b"jpeg bytes", 16));
        assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_ne!(a, hashed_unit(b"other bytes", 16));
    }
}
