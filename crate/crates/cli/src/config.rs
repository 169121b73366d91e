//! Optional TOML config file. Precedence: flags, then file, then defaults.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context;
use cxr_reward::ontology::WeightTable;
use cxr_reward::reward::{CounterRegistry, RewardConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub reward: RewardSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub serve: ServeSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSection {
    pub l_min: Option<u32>,
    pub epsilon_group: Option<f64>,
    pub token_scheme: Option<String>,
    pub weights: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: Option<f64>,
    pub steps: Option<usize>,
    pub group_size: Option<usize>,
    pub temperature: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub subsets: Option<Vec<String>>,
    pub exclude_undefined: Option<bool>,
    pub uncertain_policy: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeSection {
    pub bind: Option<String>,
    pub max_batch: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Reward flags shared by every command that scores.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct RewardFlags {
    /// Overshort threshold in tokens; 0 disables the length penalty.
    #[arg(long)]
    pub l_min: Option<u32>,
    /// Stabilizer added to the group standard deviation.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Token counting scheme (whitespace | chars).
    #[arg(long)]
    pub token_scheme: Option<String>,
    /// Class weight override, repeatable: --weight "Pleural Effusion=2".
    #[arg(long = "weight", value_name = "CLASS=W")]
    pub weights: Vec<String>,
}

impl RewardFlags {
    pub fn resolve(&self, file: &RewardSection, base: RewardConfig) -> anyhow::Result<RewardConfig> {
        let mut cfg = base;
        let mut overrides: BTreeMap<String, f64> = file.weights.clone().unwrap_or_default();
        for w in &self.weights {
            let (name, value) = w.rsplit_once('=').with_context(|| format!("--weight expects CLASS=W, got {w:?}"))?;
            let value: f64 = value.trim().parse().with_context(|| format!("bad weight in {w:?}"))?;
            overrides.insert(name.trim().to_string(), value);
        }
        if !overrides.is_empty() {
            cfg.weights = WeightTable::from_overrides(overrides.iter().map(|(k, v)| (k.as_str(), *v)))?;
        }
        if let Some(v) = self.l_min.or(file.l_min) {
            cfg.l_min = v;
        }
        if let Some(v) = self.epsilon.or(file.epsilon_group) {
            cfg.epsilon_group = v;
        }
        if let Some(v) = self.token_scheme.clone().or_else(|| file.token_scheme.clone()) {
            cfg.token_scheme = v;
        }
        cfg.validate()?;
        CounterRegistry::default().get(&cfg.token_scheme)?;
        Ok(cfg)
    }
}

/// Prints the effective configuration to stderr.
pub fn print_resolved<T: Serialize>(command: &str, value: &T) {
    match toml::to_string(value) {
        Ok(text) => eprintln!("# resolved config ({command})\n{text}"),
        Err(e) => eprintln!("# resolved config ({command}) unavailable: {e}"),
    }
}
