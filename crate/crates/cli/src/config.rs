use std::path::{Path, PathBuf};

use alldepth::backbone::{BackboneArch, UrlConfig};
use alldepth::depthmap::io::sha256_hex;
use alldepth::metrics::EvalConfig;
use alldepth::spade::SpadeTrainConfig;
use alldepth::synth::DatasetConfig;
use alldepth::{Error, Result};
use serde::{Deserialize, Serialize};

/// Environment variable naming the directory relative checkpoint paths resolve against.
pub const CACHE_ENV: &str = "SPADE_URL_CACHE";

/// Every tunable of the pipeline in one document. Missing keys take their
/// defaults; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub spade: SpadeTrainConfig,
    /// URL training; `url.fusion` also drives preprocessing and plug-and-play evaluation.
    pub url: UrlConfig,
    pub backbone: BackboneConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scenes: usize,
    pub seed: u64,
    pub dataset: DatasetConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scenes: 200,
            seed: 0,
            dataset: DatasetConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Registry name.
    pub name: String,
    /// Architecture table handed to the registry entry.
    pub arch: serde_json::Value,
    /// Direct training on raw sparse input (`fusion` is unused here).
    pub train: UrlConfig,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            name: "reference".into(),
            arch: serde_json::to_value(BackboneArch::default()).expect("arch serializes"),
            train: UrlConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml(&text)
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to toml")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn digest(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.dataset.validate()?;
        self.spade.validate()?;
        self.url.validate()?;
        self.backbone.train.validate()?;
        self.eval.validate()
    }
}

/// Relative checkpoint paths live under the cache directory when it is set.
pub fn checkpoint_path(p: &Path) -> PathBuf {
    match std::env::var_os(CACHE_ENV) {
        Some(dir) if p.is_relative() && !dir.is_empty() => PathBuf::from(dir).join(p),
        _ => p.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[spade]\nepochs = 3\n").is_err());
        assert!(RunConfig::from_toml("colour = 1\n").is_err());
        assert!(RunConfig::from_toml("[backbone.arch]\nlevels = 2\n").is_ok());
    }

    #[test]
    fn partial_documents_keep_other_defaults() {
        let cfg =
            RunConfig::from_toml("[url.fusion]\ntau = -inf\nalpha = 0.8\nbeta = 0.0\n").unwrap();
        assert_eq!(cfg.url.fusion.tau, f64::NEG_INFINITY);
        assert_eq!(cfg.spade, SpadeTrainConfig::default());
        assert_ne!(cfg.digest(), RunConfig::default().digest());
    }

    #[test]
    fn defaults_carry_the_documented_values() {
        let cfg = RunConfig::default();
        assert_eq!((cfg.spade.stage1.epochs, cfg.spade.stage2.epochs), (30, 55));
        assert_eq!(cfg.url.fusion.tau, 5.0);
        assert_eq!((cfg.url.fusion.alpha, cfg.url.fusion.beta), (0.8, 0.0));
        assert_eq!(cfg.eval.max_depth, 80.0);
        assert_eq!((cfg.url.loss.w_sup, cfg.url.loss.w_sm), (1.0, 0.1));
    }
}
