//! The pipeline configuration file: TOML with one table per stage.
//!
//! ```toml
//! seed = 7
//!
//! [refine]
//! beta = 2.0
//! calibrate = false
//! ```
//!
//! Every key is optional; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::{AdaptConfig, DenoiseConfig};
use crate::error::{Error, Result};
use crate::labeling::LabelConfig;
use crate::refine::RefineConfig;
use crate::simhead::{HeadConfig, NeighborhoodConfig, NeighborhoodSpec};
use crate::synthgen::ScenarioConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root seed; every stage derives its own stream from it.
    pub seed: u64,
    /// Worker threads; `None` uses all cores.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub label: LabelConfig,
    pub neighborhood: NeighborhoodConfig,
    pub head: HeadConfig,
    pub refine: RefineConfig,
    pub denoise: DenoiseConfig,
    pub adapt: AdaptConfig,
    pub synth: ScenarioConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::MissingInput {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_toml(&text).map_err(|e| e.in_file(path))
    }

    pub fn validate(&self) -> Result<()> {
        self.label.validate()?;
        self.spec()?;
        self.head.validate()?;
        self.refine.validate()?;
        self.denoise.validate()?;
        self.adapt.validate()?;
        self.synth.validate()?;
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        Ok(())
    }

    pub fn spec(&self) -> Result<NeighborhoodSpec> {
        NeighborhoodSpec::from_config(&self.neighborhood)
    }

    /// Canonical JSON echo of the configuration, recorded in manifests.
    pub fn echo(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            // Directories vary between equivalent runs.
            map.remove("input");
            map.remove("output");
            map.remove("threads");
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = PipelineConfig::from_toml("").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(cfg.label.gamma, 0.75);
        assert_eq!(cfg.neighborhood.radius, 4.0);
        assert_eq!(cfg.refine.beta, 2.0);
        assert_eq!(cfg.refine.rounds, 4);
        assert_eq!(cfg.denoise.gamma_low, 0.4);
        assert_eq!(cfg.denoise.gamma_high, 0.85);
        assert_eq!(cfg.adapt.epochs, 10);
        assert_eq!(cfg.spec().unwrap().len(), 48);
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg = PipelineConfig::from_toml("seed = 3\n[refine]\ncalibrate = false\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert!(!cfg.refine.calibrate);
        assert_eq!(cfg.refine.beta, 2.0);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = PipelineConfig::from_toml("[refine]\nbetta = 2.0\n").unwrap_err().to_string();
        assert!(err.contains("betta"), "{err}");
        let err = PipelineConfig::from_toml("colour = 1\n").unwrap_err().to_string();
        assert!(err.contains("colour"), "{err}");
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(PipelineConfig::from_toml("[refine]\nbeta = 0.5\n").is_err());
        assert!(PipelineConfig::from_toml("[denoise]\ngamma_low = 0.9\n").is_err());
        assert!(PipelineConfig::from_toml("threads = 0\n").is_err());
    }

    #[test]
    fn synth_seed_is_not_configurable() {
        assert!(PipelineConfig::from_toml("[synth]\nseed = 1\n").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let cfg = PipelineConfig { seed: 11, ..Default::default() };
        let echoed: PipelineConfig = serde_json::from_value(cfg.echo()).unwrap();
        assert_eq!(echoed, cfg);
    }
}
