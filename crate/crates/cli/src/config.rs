use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use vtr_core::controller::ControlGains;
use vtr_core::eval::{ScoreConfig, TurnConfig};
use vtr_core::localization::LocalizationConfig;
use vtr_core::perception::FieldConfig;
use vtr_core::pipeline::PipelineConfig;
use vtr_core::relpose::OracleConfig;
use vtr_core::sim::TeachConfig;
use vtr_core::topomap::SelectorConfig;

/// Effective configuration of every command. All sections default.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub teach: TeachConfig,
    pub perception: PerceptionConfig,
    pub selector: SelectorConfig,
    pub localization: LocalizationConfig,
    pub estimator: EstimatorConfig,
    pub bridge: Option<BridgeConfig>,
    pub controller: ControlGains,
    pub pipeline: PipelineConfig,
    pub eval: EvalConfig,
    /// Drives the appearance field, measurement noise and estimator noise.
    pub seed: u64,
}

/// Either a named fixture or a JSON world file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub fixture: Option<String>,
    pub file: Option<PathBuf>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self { fixture: Some("standard-short".into()), file: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Field,
    Bridge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptionConfig {
    pub provider: Backend,
    pub dimension: usize,
    pub correlation_length: f64,
    pub heading_weight: f64,
    pub scene_sigma: f64,
    pub measurement_sigma: f64,
    /// When set, `scene_sigma` is replaced by the value that yields this mean
    /// teach/repeat similarity along the route.
    pub calibrate_similarity: Option<f64>,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        let f = FieldConfig::default();
        Self {
            provider: Backend::Field,
            dimension: f.dimension,
            correlation_length: f.correlation_length,
            heading_weight: f.heading_weight,
            scene_sigma: f.scene_sigma,
            measurement_sigma: f.measurement_sigma,
            calibrate_similarity: None,
        }
    }
}

impl PerceptionConfig {
    pub fn field(&self, seed: u64) -> FieldConfig {
        FieldConfig {
            dimension: self.dimension,
            correlation_length: self.correlation_length,
            heading_weight: self.heading_weight,
            scene_sigma: self.scene_sigma,
            measurement_sigma: self.measurement_sigma,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Ground-truth relative pose with configurable noise (simulation only).
    #[default]
    Oracle,
    Bridge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    pub oracle: OracleConfig,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { kind: EstimatorKind::Oracle, oracle: OracleConfig::default() }
    }
}

impl EstimatorConfig {
    pub fn uses_bridge(&self) -> bool {
        self.kind == EstimatorKind::Bridge
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeConfig {
    /// Program and arguments, whitespace separated.
    pub command: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_hello_timeout_ms")]
    pub hello_timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    400
}

fn default_hello_timeout_ms() -> u64 {
    30_000
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub turns: TurnConfig,
    pub score: ScoreConfig,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"seeed": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"controller": {"k_rh": 1}}"#).is_err());
    }

    #[test]
    fn effective_config_round_trips() {
        let cfg = RunConfig { seed: 9, ..RunConfig::default() };
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
    }
}
