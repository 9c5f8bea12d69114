//! Run configuration stored as a single TOML file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cenet_core::{AblationVariant, HyperParams, InferenceConfig};
use serde::{Deserialize, Serialize};

/// Environment variable naming the context cache directory when the config leaves it unset.
pub const CACHE_DIR_ENV: &str = "CENET_CACHE_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `train.txt`, `valid.txt`, `test.txt` and `stat.txt`.
    pub dir: PathBuf,
    /// Raw-time units per granule.
    pub granularity: u32,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: PathBuf::from("data"),
            granularity: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheConfig {
    pub enabled: bool,
    /// Defaults to `$CENET_CACHE_DIR`, else `<out_dir>/cache`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            enabled: true,
            dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationVariant>,
    pub data: DataConfig,
    pub hyperparams: HyperParams,
    pub inference: InferenceConfig,
    pub cache: CacheConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("runs/default"),
            ablation: None,
            data: DataConfig::default(),
            hyperparams: HyperParams::default(),
            inference: InferenceConfig::default(),
            cache: CacheConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("parsing run configuration")?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing run configuration")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))
    }

    /// Rejects settings no run can use. A zero cross-entropy weight leaves
    /// the prediction heads untrained, so it is refused here.
    pub fn validate(&self) -> Result<()> {
        self.hyperparams.validate()?;
        if self.hyperparams.alpha <= 0.0 {
            bail!("hyperparams.alpha must be > 0; with alpha = 0 the prediction heads receive no training signal");
        }
        if self.data.granularity == 0 {
            bail!("data.granularity must be positive");
        }
        Ok(())
    }

    /// Hyperparameters after the ablation, if any, is applied.
    pub fn effective_hyperparams(&self) -> HyperParams {
        let mut hp = self.hyperparams.clone();
        if self.ablation.is_some_and(|a| a.plan().ce_only) {
            hp.alpha = 1.0;
        }
        hp
    }

    pub fn cache_dir(&self) -> PathBuf {
        if let Some(dir) = &self.cache.dir {
            return dir.clone();
        }
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.out_dir.join("cache"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cenet_core::{FilterMode, MaskMode};

    #[test]
    fn roundtrip_default_and_custom() {
        let mut cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        cfg.ablation = Some(AblationVariant::NoCl);
        cfg.hyperparams.lr = 0.0003;
        cfg.hyperparams.alpha = 0.7;
        cfg.inference.mask_mode = MaskMode::GroundTruth;
        cfg.inference.filter_mode = FilterMode::TimeAware;
        cfg.cache.dir = Some("/tmp/c".into());
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[hyperparams]\nlearning_rate = 0.1").is_err());
        assert!(RunConfig::from_toml("[inference]\nmask_mode = \"sometimes\"").is_err());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg =
            RunConfig::from_toml("ablation = \"no-stage2\"\n[hyperparams]\ndim = 8\n").unwrap();
        assert_eq!(cfg.hyperparams.dim, 8);
        assert_eq!(cfg.hyperparams.alpha, 0.2);
        assert_eq!(cfg.ablation, Some(AblationVariant::NoStage2));
    }

    #[test]
    fn zero_alpha_is_rejected() {
        let mut cfg = RunConfig::default();
        cfg.hyperparams.alpha = 0.0;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("alpha"), "{err}");
        cfg.hyperparams.alpha = 0.2;
        cfg.validate().unwrap();
    }

    #[test]
    fn ce_only_ablations_force_alpha_one() {
        let mut cfg = RunConfig {
            ablation: Some(AblationVariant::NoStage1),
            ..Default::default()
        };
        assert_eq!(cfg.effective_hyperparams().alpha, 1.0);
        cfg.ablation = Some(AblationVariant::HisOnly);
        assert_eq!(cfg.effective_hyperparams().alpha, 0.2);
    }
}
