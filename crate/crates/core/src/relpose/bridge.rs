//! Client for out-of-process embedding / relative-pose models speaking
//! newline-delimited JSON over the child's stdin/stdout.
//!
//! Requests: `{"op": "hello" | "embed" | "relpose", "id": n, ...}`.
//! Replies carry the same `id` and either result fields or `"error"`.
//! One request is in flight at a time; replies to requests that already
//! timed out are discarded by id.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use nalgebra::{Matrix3, Vector3};
use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;

use super::{EstimateFailure, FrameConvention, PoseEstimator};
use crate::geometry::{orthonormality_error, Descriptor, Transform3, ROTATION_TOLERANCE};
use crate::perception::{DescriptorProvider, Observation, PerceptionError, Session};
use crate::topomap::TopoNode;

pub const PROTOCOL_VERSION: u64 = 1;
/// Rotations off by more than this are rejected rather than re-orthonormalized.
pub const MAX_REPAIRABLE_ORTHONORMALITY: f64 = 1e-3;
/// Unit-norm tolerance for descriptors received on the wire.
pub const WIRE_NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BridgeError {
    #[error("failed to start bridge: {0}")]
    Spawn(String),
    #[error("bridge i/o: {0}")]
    Io(String),
    #[error("timeout after {0} ms")]
    Timeout(u64),
    #[error("bridge exited")]
    Disconnected,
    #[error("malformed reply: {0}")]
    Malformed(String),
    #[error("bridge error: {0}")]
    Remote(String),
    #[error("handshake rejected: {0}")]
    Handshake(String),
    #[error("invalid rotation: {0}")]
    InvalidRotation(String),
    #[error("invalid descriptor: {0}")]
    InvalidDescriptor(String),
}

impl From<BridgeError> for EstimateFailure {
    fn from(e: BridgeError) -> Self {
        match e {
            BridgeError::Timeout(ms) => EstimateFailure::Timeout(ms),
            BridgeError::Malformed(m) => EstimateFailure::Malformed(m),
            BridgeError::InvalidRotation(m) => EstimateFailure::InvalidRotation(m),
            other => EstimateFailure::Backend(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslationScale {
    Metric,
    Unit,
}

/// Capabilities declared by the bridge in its `hello` reply.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct BridgeHello {
    pub descriptor_dim: usize,
    pub frame_convention: FrameConvention,
    #[serde(default)]
    pub models: Value,
    pub protocol: u64,
    #[serde(default = "default_scale")]
    pub translation_scale: TranslationScale,
}

fn default_scale() -> TranslationScale {
    TranslationScale::Metric
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeOptions {
    /// Per-request reply deadline.
    pub timeout: Duration,
    /// Deadline for the handshake, which may include model loading.
    pub hello_timeout: Duration,
}

impl Default for BridgeOptions {
    fn default() -> Self {
        Self { timeout: Duration::from_millis(400), hello_timeout: Duration::from_secs(30) }
    }
}

pub struct BridgeClient {
    child: Child,
    stdin: ChildStdin,
    replies: Receiver<String>,
    next_id: i64,
    hello: BridgeHello,
    options: BridgeOptions,
}

impl std::fmt::Debug for BridgeClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BridgeClient").field("hello", &self.hello).field("next_id", &self.next_id).finish()
    }
}

impl BridgeClient {
    /// Starts `program args...` and performs the `hello` handshake.
    pub fn spawn(program: &str, args: &[String], options: BridgeOptions) -> Result<Self, BridgeError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| BridgeError::Spawn(format!("{program}: {e}")))?;
        let stdin = child.stdin.take().expect("stdin piped");
        let stdout = child.stdout.take().expect("stdout piped");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let placeholder = BridgeHello {
            descriptor_dim: 0,
            frame_convention: FrameConvention::CameraOptical,
            models: Value::Null,
            protocol: 0,
            translation_scale: TranslationScale::Metric,
        };
        let mut client = Self { child, stdin, replies: rx, next_id: 0, hello: placeholder, options };
        let reply = client.request(json!({"op": "hello"}), options.hello_timeout)?;
        let hello: BridgeHello = serde_json::from_value(reply).map_err(|e| BridgeError::Handshake(e.to_string()))?;
        if hello.protocol != PROTOCOL_VERSION {
            return Err(BridgeError::Handshake(format!("unsupported protocol {}", hello.protocol)));
        }
        if hello.translation_scale == TranslationScale::Unit {
            return Err(BridgeError::Handshake("unit-scale translation cannot drive a metric controller".into()));
        }
        if hello.descriptor_dim == 0 {
            return Err(BridgeError::Handshake("descriptor_dim must be > 0".into()));
        }
        client.hello = hello;
        Ok(client)
    }

    /// Runs a whitespace-separated command line.
    pub fn spawn_command_line(command: &str, options: BridgeOptions) -> Result<Self, BridgeError> {
        let mut parts = command.split_whitespace().map(str::to_string);
        let program = parts.next().ok_or_else(|| BridgeError::Spawn("empty command".into()))?;
        let args: Vec<String> = parts.collect();
        Self::spawn(&program, &args, options)
    }

    pub fn hello(&self) -> &BridgeHello {
        &self.hello
    }

    fn request(&mut self, mut body: Value, timeout: Duration) -> Result<Value, BridgeError> {
        let id = self.next_id;
        self.next_id += 1;
        body["id"] = json!(id);
        let mut line = serde_json::to_string(&body).map_err(|e| BridgeError::Io(e.to_string()))?;
        line.push('\n');
        self.stdin
            .write_all(line.as_bytes())
            .and_then(|_| self.stdin.flush())
            .map_err(|e| BridgeError::Io(e.to_string()))?;

        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            let raw = match self.replies.recv_timeout(left) {
                Ok(raw) => raw,
                Err(RecvTimeoutError::Timeout) => return Err(BridgeError::Timeout(timeout.as_millis() as u64)),
                Err(RecvTimeoutError::Disconnected) => return Err(BridgeError::Disconnected),
            };
            let reply: Value = serde_json::from_str(&raw).map_err(|e| BridgeError::Malformed(format!("{e}: {raw}")))?;
            let reply_id = reply.get("id").and_then(Value::as_i64).ok_or_else(|| BridgeError::Malformed(format!("missing id: {raw}")))?;
            if reply_id == -1 {
                let msg = reply.get("error").and_then(Value::as_str).unwrap_or("unparseable request");
                return Err(BridgeError::Malformed(format!("bridge rejected request line: {msg}")));
            }
            if reply_id < id {
                continue;
            }
            if reply_id > id {
                return Err(BridgeError::Malformed(format!("reply id {reply_id} for request {id}")));
            }
            if let Some(err) = reply.get("error") {
                return Err(BridgeError::Remote(err.as_str().map_or_else(|| err.to_string(), str::to_string)));
            }
            return Ok(reply);
        }
    }

    pub fn embed(&mut self, image: &[u8]) -> Result<Descriptor, BridgeError> {
        let reply = self.request(json!({"op": "embed", "image_b64": B64.encode(image)}), self.options.timeout)?;
        let values: Vec<f64> = reply
            .get("descriptor")
            .cloned()
            .and_then(|v| serde_json::from_value(v).ok())
            .ok_or_else(|| BridgeError::Malformed("embed reply lacks a numeric descriptor".into()))?;
        if values.len() != self.hello.descriptor_dim {
            return Err(BridgeError::InvalidDescriptor(format!(
                "dimension {} but handshake declared {}",
                values.len(),
                self.hello.descriptor_dim
            )));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= WIRE_NORM_TOLERANCE) {
            return Err(BridgeError::InvalidDescriptor(format!("norm {norm}")));
        }
        Descriptor::new(values).map_err(|e| BridgeError::InvalidDescriptor(e.to_string()))
    }

    /// Pose of image `b` in the frame of image `a`, in the declared convention.
    pub fn relpose(&mut self, a: &[u8], b: &[u8]) -> Result<Transform3, BridgeError> {
        let reply = self.request(
            json!({"op": "relpose", "image_a_b64": B64.encode(a), "image_b_b64": B64.encode(b)}),
            self.options.timeout,
        )?;
        let rotation: [f64; 9] = reply
            .get("rotation")
            .cloned()
            .and_then(|v| serde_json::from_value(v).ok())
            .ok_or_else(|| BridgeError::Malformed("relpose reply needs 9 rotation entries".into()))?;
        let translation: [f64; 3] = reply
            .get("translation")
            .cloned()
            .and_then(|v| serde_json::from_value(v).ok())
            .ok_or_else(|| BridgeError::Malformed("relpose reply needs 3 translation entries".into()))?;
        validate_rotation(rotation, translation)
    }
}

impl Drop for BridgeClient {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Accepts valid rotations, projects slightly-off ones onto SO(3), and rejects
/// the rest (including reflections).
pub fn validate_rotation(rows: [f64; 9], translation: [f64; 3]) -> Result<Transform3, BridgeError> {
    if rows.iter().chain(&translation).any(|v| !v.is_finite()) {
        return Err(BridgeError::InvalidRotation("non-finite entries".into()));
    }
    let m = Matrix3::from_row_slice(&rows);
    let t = Vector3::from(translation);
    let det = m.determinant();
    if det <= 0.0 {
        return Err(BridgeError::InvalidRotation(format!("determinant {det}")));
    }
    let err = orthonormality_error(&m);
    if err <= ROTATION_TOLERANCE && (det - 1.0).abs() <= ROTATION_TOLERANCE {
        return Transform3::new(m, t).map_err(|e| BridgeError::InvalidRotation(e.to_string()));
    }
    if err > MAX_REPAIRABLE_ORTHONORMALITY {
        return Err(BridgeError::InvalidRotation(format!("orthonormality error {err:e}")));
    }
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let r = u * v_t;
    Transform3::new(r, t).map_err(|e| BridgeError::InvalidRotation(e.to_string()))
}

/// Shared session used as both descriptor provider and pose estimator.
#[derive(Debug, Clone)]
pub struct BridgeHandle(Arc<Mutex<BridgeClient>>);

impl BridgeHandle {
    pub fn new(client: BridgeClient) -> Self {
        Self(Arc::new(Mutex::new(client)))
    }

    fn with<T>(&self, f: impl FnOnce(&mut BridgeClient) -> T) -> T {
        let mut guard = self.0.lock().unwrap_or_else(|p| p.into_inner());
        f(&mut guard)
    }
}

impl DescriptorProvider for BridgeHandle {
    fn dimension(&self) -> usize {
        self.with(|c| c.hello.descriptor_dim)
    }

    fn embed(&mut self, observation: &Observation, _session: Session) -> Result<Descriptor, PerceptionError> {
        self.with(|c| c.embed(&observation.bytes)).map_err(|e| PerceptionError::Backend(e.to_string()))
    }
}

impl PoseEstimator for BridgeHandle {
    fn convention(&self) -> FrameConvention {
        self.with(|c| c.hello.frame_convention)
    }

    fn estimate(&mut self, current: &Observation, subgoal: &TopoNode) -> Result<Transform3, EstimateFailure> {
        self.with(|c| c.relpose(&current.bytes, &subgoal.observation)).map_err(EstimateFailure::from)
    }
}
