use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hig_core::evaluation::MatchCriteria;
use hig_core::graph::HierarchyConfig;
use hig_core::synthgen::ScenarioConfig;
use hig_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

pub const RUN_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
}

/// Everything a run needs, as one JSON document. Command-line flags
/// override individual keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub scenario: ScenarioConfig,
    pub hierarchy: HierarchyConfig,
    pub train: TrainConfig,
    pub matching: MatchCriteria,
    pub paths: Paths,
    pub sampling_rate: usize,
    /// K values for recall@K.
    pub ks: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: RUN_SCHEMA_VERSION,
            scenario: ScenarioConfig::default(),
            hierarchy: HierarchyConfig::default(),
            train: TrainConfig::default(),
            matching: MatchCriteria::default(),
            paths: Paths::default(),
            sampling_rate: 1,
            ks: vec![20, 50, 100],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let config: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != RUN_SCHEMA_VERSION {
            bail!(
                "unsupported schema_version {} (expected {RUN_SCHEMA_VERSION})",
                self.schema_version
            );
        }
        if self.sampling_rate == 0 {
            bail!("sampling_rate must be at least 1");
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            bail!("ks must be a non-empty list of positive values");
        }
        self.scenario.validate()?;
        self.hierarchy.validate()?;
        self.train.validate(self.hierarchy.levels)?;
        self.matching.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_rejects_unknown_keys() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
        assert!(c.validate().is_ok());
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"lr": 1}}"#).is_err());
        let partial: RunConfig = serde_json::from_str(r#"{"sampling_rate": 2}"#).unwrap();
        assert_eq!(partial.sampling_rate, 2);
        let old: RunConfig = serde_json::from_str(r#"{"schema_version": 9}"#).unwrap();
        assert!(old.validate().is_err());
    }
}
