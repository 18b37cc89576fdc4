//! Effective run configuration: defaults, then a config file, then
//! `DEFECTNET_*` environment variables, then command-line flags.

use anyhow::{bail, Context, Result};
use defectnet::config;
use defectnet::data::DatasetSpec;
use defectnet::model::ModelConfig;
use defectnet::trainer::TrainConfig;

pub const ENV_PREFIX: &str = "DEFECTNET_";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DatasetSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DatasetSpec::standard(),
        }
    }
}

/// `attention.beta` → `DEFECTNET_ATTENTION_BETA`.
pub fn env_name(key: &str) -> String {
    let tail: String = key
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' })
        .collect();
    format!("{ENV_PREFIX}{tail}")
}

impl RunConfig {
    pub fn model_and_train_pairs(&self) -> Vec<(String, String)> {
        let mut out = self.model.pairs();
        out.extend(self.train.pairs());
        out
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut out = self.model_and_train_pairs();
        out.extend(self.data.pairs());
        out
    }

    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        if self.model.set(key, raw)? || self.train.set(key, raw)? || self.data.set(key, raw)? {
            Ok(())
        } else {
            bail!(config::unknown(key))
        }
    }

    /// A `key = value` file. Any `data.count.*` entry replaces the whole
    /// combination list.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let entries = config::parse(text)?;
        if entries.iter().any(|e| e.key.starts_with("data.count.")) {
            self.data.combinations.clear();
        }
        for e in entries {
            self.set(&e.key, &e.value).with_context(|| format!("line {}", e.line))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &std::path::Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// Every variable starting with the prefix must name a known key.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        let known: Vec<(String, String)> = self.pairs().into_iter().map(|(k, _)| (env_name(&k), k)).collect();
        let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        vars.sort();
        for (name, raw) in vars {
            let Some((_, key)) = known.iter().find(|(n, _)| *n == name) else {
                bail!("unknown environment variable {name}");
            };
            self.set(key, &raw).with_context(|| format!("from {name}"))?;
        }
        Ok(())
    }

    /// `key=value` overrides from `--set`.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let Some((k, v)) = o.split_once('=') else {
                bail!("--set expects key=value, got {o:?}");
            };
            self.set(k.trim(), v.trim()).with_context(|| format!("--set {o}"))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        Ok(())
    }
}

pub fn echo(pairs: &[(String, String)]) -> String {
    config::format(pairs)
}
