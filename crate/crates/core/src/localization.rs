//! Place recognition over a topological map with a discrete Bayes filter
//! along the node index.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Descriptor;
use crate::topomap::TopoMap;

/// Mass placed off the start node by [`Prior::DeltaAt`].
pub const DELTA_PRIOR_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LocalizationError {
    #[error("belief needs at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("start node {start} outside map of {n} nodes")]
    StartOutOfRange { start: usize, n: usize },
    #[error("query dimension {query} does not match map dimension {map}")]
    DimensionMismatch { query: usize, map: usize },
    #[error("likelihood length {likelihood} does not match belief length {belief}")]
    LengthMismatch { belief: usize, likelihood: usize },
    #[error("likelihood entries must be finite and > 0")]
    InvalidLikelihood,
    #[error("belief collapse")]
    BeliefCollapse,
    #[error("invalid motion kernel: {0}")]
    InvalidKernel(String),
    #[error("invalid likelihood config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "start")]
pub enum Prior {
    Uniform,
    DeltaAt(usize),
}

/// Probability distribution over map node indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    probs: Vec<f64>,
}

impl Belief {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Most probable node; ties go to the larger index.
    pub fn mode(&self) -> usize {
        argmax_forward(&self.probs)
    }

    fn normalized(mut probs: Vec<f64>) -> Result<Self, LocalizationError> {
        let total: f64 = probs.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(LocalizationError::BeliefCollapse);
        }
        probs.iter_mut().for_each(|p| *p /= total);
        Ok(Self { probs })
    }
}

/// Index of the largest entry, preferring the later index on ties.
pub fn argmax_forward(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v >= values[best] {
            best = i;
        }
    }
    best
}

pub fn init_belief(n_nodes: usize, prior: Prior) -> Result<Belief, LocalizationError> {
    if n_nodes < 2 {
        return Err(LocalizationError::TooFewNodes(n_nodes));
    }
    let probs = match prior {
        Prior::Uniform => vec![1.0 / n_nodes as f64; n_nodes],
        Prior::DeltaAt(start) => {
            if start >= n_nodes {
                return Err(LocalizationError::StartOutOfRange { start, n: n_nodes });
            }
            let mut p = vec![DELTA_PRIOR_EPSILON / (n_nodes - 1) as f64; n_nodes];
            p[start] = 1.0 - DELTA_PRIOR_EPSILON;
            p
        }
    };
    Ok(Belief { probs })
}

/// Node-index transition probabilities applied once per cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionKernel {
    pub offsets: Vec<(i64, f64)>,
}

impl Default for MotionKernel {
    fn default() -> Self {
        Self { offsets: vec![(-1, 0.1), (0, 0.2), (1, 0.5), (2, 0.2)] }
    }
}

impl MotionKernel {
    pub fn identity() -> Self {
        Self { offsets: vec![(0, 1.0)] }
    }

    pub fn validate(&self) -> Result<(), LocalizationError> {
        let bad = |m: &str| Err(LocalizationError::InvalidKernel(m.into()));
        if self.offsets.iter().any(|&(_, p)| !(p.is_finite() && p >= 0.0)) {
            return bad("probabilities must be finite and >= 0");
        }
        let total: f64 = self.offsets.iter().map(|&(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad("probabilities must sum to 1");
        }
        if !self.offsets.iter().any(|&(d, p)| d > 0 && p > 0.0) {
            return bad("needs a positive forward offset");
        }
        Ok(())
    }
}

/// Motion update: convolution along the node index with clamp-and-accumulate
/// at both ends of the chain.
pub fn predict(belief: &Belief, kernel: &MotionKernel) -> Belief {
    let n = belief.len() as i64;
    let mut out = vec![0.0; belief.len()];
    for (i, &p) in belief.probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for &(offset, k) in &kernel.offsets {
            let j = (i as i64 + offset).clamp(0, n - 1) as usize;
            out[j] += p * k;
        }
    }
    // Mass is conserved exactly up to rounding; the floor of any entry is 0.
    Belief::normalized(out).unwrap_or_else(|_| belief.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LikelihoodConfig {
    /// Softmax temperature applied to cosine similarities.
    pub temperature: f64,
    /// Additive floor keeping every likelihood strictly positive.
    pub floor: f64,
}

impl Default for LikelihoodConfig {
    fn default() -> Self {
        Self { temperature: 0.07, floor: 1e-6 }
    }
}

impl LikelihoodConfig {
    pub fn validate(&self) -> Result<(), LocalizationError> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(LocalizationError::InvalidConfig("temperature must be > 0".into()));
        }
        if !(self.floor.is_finite() && self.floor > 0.0) {
            return Err(LocalizationError::InvalidConfig("floor must be > 0".into()));
        }
        Ok(())
    }
}

/// Cosine similarity of `query` against every node, in node order.
pub fn similarities(query: &Descriptor, map: &TopoMap) -> Result<Vec<f64>, LocalizationError> {
    if query.dim() != map.descriptor_dim {
        return Err(LocalizationError::DimensionMismatch { query: query.dim(), map: map.descriptor_dim });
    }
    Ok(map.nodes.iter().map(|n| query.dot(&n.descriptor).clamp(-1.0, 1.0)).collect())
}

/// `L_i = exp(sim_i / τ) + ε`, unnormalized.
pub fn likelihood_from_similarities(sims: &[f64], config: &LikelihoodConfig) -> Vec<f64> {
    sims.iter().map(|s| (s / config.temperature).exp() + config.floor).collect()
}

pub fn measurement_likelihood(query: &Descriptor, map: &TopoMap, config: &LikelihoodConfig) -> Result<Vec<f64>, LocalizationError> {
    Ok(likelihood_from_similarities(&similarities(query, map)?, config))
}

/// Bayes correction: posterior ∝ belief ⊙ likelihood.
pub fn update(belief: &Belief, likelihood: &[f64]) -> Result<Belief, LocalizationError> {
    if likelihood.len() != belief.len() {
        return Err(LocalizationError::LengthMismatch { belief: belief.len(), likelihood: likelihood.len() });
    }
    if likelihood.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(LocalizationError::InvalidLikelihood);
    }
    let mut scaled: Vec<f64> = belief.probs.iter().zip(likelihood).map(|(p, l)| p * l).collect();
    // Rescale by the peak first so that very sharp likelihoods cannot overflow.
    let peak = scaled.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 && peak.is_finite() {
        scaled.iter_mut().for_each(|v| *v /= peak);
    }
    Belief::normalized(scaled)
}

/// `min(mode + lookahead, n_nodes − 1)`.
pub fn select_subgoal(belief: &Belief, lookahead: usize, n_nodes: usize) -> usize {
    (belief.mode() + lookahead).min(n_nodes.saturating_sub(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalizationMode {
    /// Temporal filtering over node indices.
    #[default]
    Filtered,
    /// Per-frame argmax retrieval, for ablations.
    RawArgmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizationConfig {
    pub kernel: MotionKernel,
    pub likelihood: LikelihoodConfig,
    pub lookahead: usize,
    pub prior: Prior,
    pub mode: LocalizationMode,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        Self {
            kernel: MotionKernel::default(),
            likelihood: LikelihoodConfig::default(),
            lookahead: 1,
            prior: Prior::DeltaAt(0),
            mode: LocalizationMode::Filtered,
        }
    }
}

impl LocalizationConfig {
    pub fn validate(&self) -> Result<(), LocalizationError> {
        self.kernel.validate()?;
        self.likelihood.validate()
    }
}

/// Result of one localization step.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationStep {
    /// Node estimate (belief mode, or raw argmax in ablation mode).
    pub estimate: usize,
    /// Best raw retrieval match, for diagnostics.
    pub raw_best: usize,
    pub subgoal: usize,
    pub belief: Belief,
}

/// Stateful tracker owning the belief for one repeat session.
#[derive(Debug, Clone)]
pub struct Localizer {
    config: LocalizationConfig,
    belief: Belief,
    n_nodes: usize,
}

impl Localizer {
    pub fn new(config: LocalizationConfig, n_nodes: usize) -> Result<Self, LocalizationError> {
        config.validate()?;
        let belief = init_belief(n_nodes, config.prior)?;
        Ok(Self { config, belief, n_nodes })
    }

    pub fn belief(&self) -> &Belief {
        &self.belief
    }

    pub fn config(&self) -> &LocalizationConfig {
        &self.config
    }

    /// Predict + update against `query` without committing the result.
    pub fn propose(&self, query: &Descriptor, map: &TopoMap) -> Result<LocalizationStep, LocalizationError> {
        let sims = similarities(query, map)?;
        let raw_best = argmax_forward(&sims);
        let likelihood = likelihood_from_similarities(&sims, &self.config.likelihood);
        let belief = update(&predict(&self.belief, &self.config.kernel), &likelihood)?;
        let estimate = match self.config.mode {
            LocalizationMode::Filtered => belief.mode(),
            LocalizationMode::RawArgmax => raw_best,
        };
        let subgoal = (estimate + self.config.lookahead).min(self.n_nodes - 1);
        Ok(LocalizationStep { estimate, raw_best, subgoal, belief })
    }

    pub fn commit(&mut self, step: &LocalizationStep) {
        self.belief = step.belief.clone();
    }

    /// Convenience: propose and commit.
    pub fn step(&mut self, query: &Descriptor, map: &TopoMap) -> Result<LocalizationStep, LocalizationError> {
        let s = self.propose(query, map)?;
        self.commit(&s);
        Ok(s)
    }
}
