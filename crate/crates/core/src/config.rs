//! Declarative run configuration: one JSON file describes the schema, the
//! generator, training hyperparameters and the experiment grid. Unknown keys
//! are rejected, and a SHA-256 fingerprint of the canonical form is stamped
//! into every artifact the run produces.

use crate::data::GeneratorConfig;
use crate::schema::{build_schema, GlobalSchema, SchemaConfig, SchemaError};
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config does not parse: {0}")]
    Parse(String),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("invalid experiment section: {0}")]
    Invalid(String),
}

/// Which domains act as sources and targets, and which seeds to sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub sources: Vec<usize>,
    pub targets: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: SchemaConfig,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub experiment: ExperimentConfig,
}

impl RunConfig {
    /// Parses and fully validates a config, returning it with its built
    /// schema.
    pub fn parse(text: &str) -> Result<(Self, GlobalSchema), ConfigError> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let schema = build_schema(&cfg.schema)?;
        cfg.validate_experiment(&schema)?;
        cfg.train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok((cfg, schema))
    }

    pub fn load(path: &Path) -> Result<(Self, GlobalSchema), ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn validate_experiment(&self, schema: &GlobalSchema) -> Result<(), ConfigError> {
        let exp = &self.experiment;
        if exp.targets.is_empty() {
            return Err(ConfigError::Invalid("no target domains listed".into()));
        }
        if exp.seeds.is_empty() {
            return Err(ConfigError::Invalid("no seeds listed".into()));
        }
        for &id in exp.sources.iter().chain(&exp.targets) {
            schema.domain(id)?;
        }
        for &t in &exp.targets {
            if exp.sources.contains(&t) {
                return Err(ConfigError::Invalid(format!(
                    "domain {t} listed as both source and target"
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical serialized form; identical configs give
    /// identical fingerprints regardless of input formatting.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&canonical);
        crate::schema::hex_lower(&hasher.finalize())
    }
}
