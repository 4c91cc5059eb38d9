//! TOML configuration. Every field is optional; explicit flags win.

use std::path::Path;

use anyhow::{Context, Result};
use aspm::circuit::AssembleConfig;
use aspm::ingest::IngestConfig;
use aspm::mln::TrainConfig;
use aspm::optimizer::OptimizerConfig;
use aspm::provider::RemoteConfig;
use aspm::shield::PlannerConfig;
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub ingest: IngestConfig,
    pub optimizer: OptimizerConfig,
    pub assemble: AssembleConfig,
    pub train: TrainSection,
    pub verify: VerifySection,
    pub embedding: EmbeddingSection,
    pub provider: Option<RemoteConfig>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    #[serde(flatten)]
    pub params: TrainConfig,
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct VerifySection {
    pub epsilon: Option<f64>,
    pub min_confidence: f64,
    pub marginalize_uncertain: bool,
    pub max_uncertain: usize,
    pub memory_capacity: usize,
    #[serde(flatten)]
    pub planner: PlannerConfig,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            epsilon: None,
            min_confidence: 0.5,
            marginalize_uncertain: false,
            max_uncertain: 16,
            memory_capacity: 256,
            planner: PlannerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    /// Dimension of the hashing embedder used when no fixture is given.
    pub dimension: usize,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        EmbeddingSection { dimension: 256 }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Config::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }
}
