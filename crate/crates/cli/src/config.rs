//! Run configuration: built-in defaults, overlaid by a TOML config file,
//! overlaid by command-line flags.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use ppvae_core::classifier::ClassifierConfig;
use ppvae_core::plugin::PluginConfig;
use ppvae_core::pretrain::PretrainConfig;

use crate::CliError;

pub const ROOT_ENV: &str = "PPVAE_CHECKPOINT_ROOT";
const FALLBACK_ROOT: &str = "checkpoints";

/// Sections of the config file. Each section's keys mirror the matching
/// library config struct; anything left out keeps its default.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub checkpoint_root: Option<PathBuf>,
    /// `"full"` or `"small"`: which built-in pretrain sizes to start from.
    pub preset: Option<String>,
    pub pretrain: Option<toml::Table>,
    pub plugin: Option<toml::Table>,
    pub sampling: Option<toml::Table>,
    pub generate: Option<toml::Table>,
    pub classifier: Option<toml::Table>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(FileConfig::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let file: FileConfig = toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        file.check_sections()?;
        Ok(file)
    }

    /// Rejects unknown keys in every section, not only the ones the running
    /// command reads.
    fn check_sections(&self) -> Result<(), CliError> {
        overlay(PretrainConfig::default(), self.pretrain.as_ref(), "pretrain")?;
        overlay(PluginConfig::default(), self.plugin.as_ref(), "plugin")?;
        overlay(SamplingConfig::default(), self.sampling.as_ref(), "sampling")?;
        overlay(GenerateConfig::default(), self.generate.as_ref(), "generate")?;
        overlay(ClassifierConfig::default(), self.classifier.as_ref(), "classifier")?;
        Ok(())
    }

    /// Flag, then config file, then the environment variable, then `./checkpoints`.
    pub fn root(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.checkpoint_root.clone())
            .or_else(|| std::env::var_os(ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(FALLBACK_ROOT))
    }
}

/// Replaces fields of `base` with the keys present in `table`. Unknown keys
/// are rejected.
pub fn overlay<T: Serialize + DeserializeOwned>(base: T, table: Option<&toml::Table>, section: &str) -> Result<T, CliError> {
    let Some(table) = table else { return Ok(base) };
    let mut value = toml::Table::try_from(&base).map_err(|e| CliError::Usage(format!("[{section}]: {e}")))?;
    for (k, v) in table {
        if !value.contains_key(k) && !OPTIONAL_KEYS.contains(&k.as_str()) {
            return Err(CliError::Usage(format!("[{section}]: unknown key {k:?}")));
        }
        value.insert(k.clone(), v.clone());
    }
    toml::Value::Table(value).try_into().map_err(|e| CliError::Usage(format!("[{section}]: {e}")))
}

/// Keys whose default is `None` and so are absent from the serialized base.
const OPTIONAL_KEYS: &[&str] = &["neg_clamp"];

/// Sets `field` when the flag was given.
pub fn set<T>(field: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *field = v;
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub n_per_condition: usize,
    pub use_negatives: bool,
    pub balance_negatives: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { n_per_condition: 200, use_negatives: true, balance_negatives: false }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub n: usize,
    pub seed: u64,
    pub max_len: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig { n: 1000, seed: 0, max_len: ppvae_core::corpus::DEFAULT_MAX_LEN }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_replaces_only_given_keys() {
        let t: toml::Table = toml::from_str("gamma = 0.003\ntotal_iters = 50\nneg_clamp = 10.0").unwrap();
        let c = overlay(PluginConfig::default(), Some(&t), "plugin").unwrap();
        assert_eq!(c.gamma, 0.003);
        assert_eq!(c.total_iters, 50);
        assert_eq!(c.neg_clamp, Some(10.0));
        assert_eq!(c.d_c, 20);
        let bad: toml::Table = toml::from_str("gama = 1.0").unwrap();
        assert!(overlay(PluginConfig::default(), Some(&bad), "plugin").is_err());
    }
}
