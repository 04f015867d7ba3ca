//! Descriptor providers and the simulated appearance field.
//!
//! The field maps a planar pose to a random-Fourier-feature vector
//! `cos(ω_k·u + b_k)` with `u = [x/ℓ, y/ℓ, h·cos ψ, h·sin ψ]`. Its expected
//! cosine similarity decays like `exp(−|Δu|²/2)`, so `ℓ` sets how quickly
//! appearance changes along the route. Repeat-session embeddings add a
//! second, fixed field scaled by `scene_sigma`; every call adds fresh
//! Gaussian measurement noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Descriptor, GeometryError, Pose2};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PerceptionError {
    #[error("invalid field config: {0}")]
    InvalidConfig(String),
    #[error("observation carries no simulator pose")]
    MissingPose,
    #[error("descriptor: {0}")]
    Descriptor(#[from] GeometryError),
    #[error("provider failure: {0}")]
    Backend(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Session {
    Teach,
    Repeat,
}

/// What a camera (real or simulated) hands to the perception stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Encoded image, or a simulator pose token.
    pub bytes: Vec<u8>,
    /// Ground truth, available only in simulation.
    pub true_pose: Option<Pose2>,
}

impl Observation {
    pub fn simulated(pose: Pose2) -> Self {
        Self { bytes: pose_token(&pose), true_pose: Some(pose) }
    }

    /// Ground truth if present, otherwise decoded from a simulator token.
    pub fn pose(&self) -> Option<Pose2> {
        self.true_pose.or_else(|| parse_pose_token(&self.bytes))
    }
}

const TOKEN_TAG: &[u8; 4] = b"SIMP";

/// 28-byte simulator observation token: `"SIMP"` then x, y, psi as f64 LE.
pub fn pose_token(pose: &Pose2) -> Vec<u8> {
    let mut out = Vec::with_capacity(28);
    out.extend_from_slice(TOKEN_TAG);
    for v in [pose.x, pose.y, pose.psi] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn parse_pose_token(bytes: &[u8]) -> Option<Pose2> {
    if bytes.len() != 28 || &bytes[..4] != TOKEN_TAG {
        return None;
    }
    let f = |i: usize| f64::from_le_bytes(bytes[4 + 8 * i..12 + 8 * i].try_into().unwrap());
    Some(Pose2::new(f(0), f(1), f(2)))
}

/// Source of visual embeddings. `&mut self` marks providers as single-owner.
pub trait DescriptorProvider {
    fn dimension(&self) -> usize;
    fn embed(&mut self, observation: &Observation, session: Session) -> Result<Descriptor, PerceptionError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub dimension: usize,
    /// Spatial correlation length ℓ, meters.
    pub correlation_length: f64,
    pub heading_weight: f64,
    /// Magnitude of the persistent repeat-session perturbation.
    pub scene_sigma: f64,
    /// Magnitude of per-call measurement noise.
    pub measurement_sigma: f64,
    pub seed: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            dimension: 64,
            correlation_length: 3.0,
            heading_weight: 1.0,
            scene_sigma: 0.0,
            measurement_sigma: 0.0,
            seed: 0,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<(), PerceptionError> {
        let bad = |m: &str| Err(PerceptionError::InvalidConfig(m.into()));
        if self.dimension < 8 {
            return bad("dimension must be >= 8");
        }
        if !(self.correlation_length.is_finite() && self.correlation_length > 0.0) {
            return bad("correlation_length must be > 0");
        }
        if !(self.scene_sigma >= 0.0 && self.measurement_sigma >= 0.0) {
            return bad("noise magnitudes must be >= 0");
        }
        if !(self.heading_weight.is_finite() && self.scene_sigma.is_finite() && self.measurement_sigma.is_finite()) {
            return bad("non-finite parameter");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Features {
    omega: Vec<[f64; 4]>,
    phase: Vec<f64>,
}

impl Features {
    fn draw(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let omega = (0..dim)
            .map(|_| std::array::from_fn(|_| StandardNormal.sample(rng)))
            .collect();
        let phase = (0..dim).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        Self { omega, phase }
    }

    /// Unit-norm feature vector at `u`.
    fn eval(&self, u: &[f64; 4]) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .omega
            .iter()
            .zip(&self.phase)
            .map(|(w, b)| (w[0] * u[0] + w[1] * u[1] + w[2] * u[2] + w[3] * u[3] + b).cos())
            .collect();
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            out.iter_mut().for_each(|v| *v /= norm);
        }
        out
    }
}

/// Deterministic appearance field derived from `FieldConfig::seed`.
#[derive(Debug, Clone)]
pub struct DescriptorField {
    config: FieldConfig,
    base: Features,
    scene: Features,
}

impl DescriptorField {
    pub fn new(config: FieldConfig) -> Result<Self, PerceptionError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let base = Features::draw(config.dimension, &mut rng);
        let scene = Features::draw(config.dimension, &mut rng);
        Ok(Self { config, base, scene })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    fn input(&self, pose: &Pose2) -> [f64; 4] {
        let l = self.config.correlation_length;
        let h = self.config.heading_weight;
        let (s, c) = pose.psi.sin_cos();
        [pose.x / l, pose.y / l, h * c, h * s]
    }

    /// Embeds `pose`, drawing measurement noise from `rng`.
    pub fn embed<R: Rng + ?Sized>(&self, pose: &Pose2, session: Session, rng: &mut R) -> Descriptor {
        let u = self.input(pose);
        let mut v = self.base.eval(&u);
        if session == Session::Repeat && self.config.scene_sigma > 0.0 {
            let s = self.config.scene_sigma;
            for (a, b) in v.iter_mut().zip(self.scene.eval(&u)) {
                *a += s * b;
            }
        }
        if self.config.measurement_sigma > 0.0 {
            let scale = self.config.measurement_sigma / (v.len() as f64).sqrt();
            for a in v.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *a += scale * z;
            }
        }
        // The base term has unit norm and the perturbations are bounded, so
        // only a pathological draw could cancel it.
        Descriptor::new(v).expect("field embedding has non-zero norm")
    }
}

/// [`DescriptorField`] plus its own seeded noise stream.
#[derive(Debug, Clone)]
pub struct FieldProvider {
    field: DescriptorField,
    rng: ChaCha8Rng,
}

impl FieldProvider {
    pub fn new(config: FieldConfig) -> Result<Self, PerceptionError> {
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6d65_6173_7572_6521);
        Ok(Self { field: DescriptorField::new(config)?, rng })
    }

    /// Same field, independent noise stream (e.g. teach vs repeat runs).
    pub fn with_noise_seed(config: FieldConfig, noise_seed: u64) -> Result<Self, PerceptionError> {
        Ok(Self { field: DescriptorField::new(config)?, rng: ChaCha8Rng::seed_from_u64(noise_seed) })
    }

    pub fn field(&self) -> &DescriptorField {
        &self.field
    }

    pub fn embed_pose(&mut self, pose: &Pose2, session: Session) -> Descriptor {
        self.field.embed(pose, session, &mut self.rng)
    }
}

impl DescriptorProvider for FieldProvider {
    fn dimension(&self) -> usize {
        self.field.config.dimension
    }

    fn embed(&mut self, observation: &Observation, session: Session) -> Result<Descriptor, PerceptionError> {
        let pose = observation.pose().ok_or(PerceptionError::MissingPose)?;
        Ok(self.embed_pose(&pose, session))
    }
}

/// Mean teach-vs-repeat similarity at identical poses.
pub fn mean_session_similarity(config: &FieldConfig, probes: &[Pose2], noise_seed: u64) -> Result<f64, PerceptionError> {
    let field = DescriptorField::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let total: f64 = probes
        .iter()
        .map(|p| {
            let t = field.embed(p, Session::Teach, &mut rng);
            let r = field.embed(p, Session::Repeat, &mut rng);
            t.dot(&r)
        })
        .sum();
    Ok(total / probes.len().max(1) as f64)
}

/// Finds the `scene_sigma` at which the mean teach/repeat similarity over
/// `probes` equals `target`, by bisection on `[0, 10]`.
pub fn calibrate_scene_sigma(config: &FieldConfig, target: f64, probes: &[Pose2]) -> Result<f64, PerceptionError> {
    let eval = |s: f64| {
        let cfg = FieldConfig { scene_sigma: s, ..config.clone() };
        mean_session_similarity(&cfg, probes, config.seed.wrapping_add(17))
    };
    if eval(0.0)? <= target {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0, 10.0);
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if eval(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
