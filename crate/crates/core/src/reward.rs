//! Verifiable rewards: set correctness, format, overshort penalty, and their
//! composite `r = r_cor * r_fmt + r_len`.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::completion::{parse_completion, Completion};
use crate::ontology::{LabelSet, Ontology, WeightTable};

pub const DEFAULT_L_MIN: u32 = 400;
pub const DEFAULT_EPSILON: f64 = 1e-4;
pub const DEFAULT_TOKEN_SCHEME: &str = "whitespace";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown token counting scheme {0:?}")]
    UnknownScheme(String),
    #[error("epsilon_group must be finite and > 0, got {0}")]
    Epsilon(f64),
}

/// Maps text to a token length `L(y)`.
pub trait TokenCounter: Send + Sync {
    fn scheme(&self) -> &str;
    fn count(&self, text: &str) -> usize;
}

/// Number of maximal non-whitespace runs.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceCounter;

impl TokenCounter for WhitespaceCounter {
    fn scheme(&self) -> &str {
        "whitespace"
    }

    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

/// Number of Unicode scalar values.
#[derive(Debug, Clone, Copy, Default)]
pub struct CharCounter;

impl TokenCounter for CharCounter {
    fn scheme(&self) -> &str {
        "chars"
    }

    fn count(&self, text: &str) -> usize {
        text.chars().count()
    }
}

/// Named token counters. `whitespace` and `chars` are always present.
#[derive(Clone)]
pub struct CounterRegistry {
    counters: BTreeMap<String, Arc<dyn TokenCounter>>,
}

impl Default for CounterRegistry {
    fn default() -> Self {
        let mut r = CounterRegistry { counters: BTreeMap::new() };
        r.register(Arc::new(WhitespaceCounter));
        r.register(Arc::new(CharCounter));
        r
    }
}

impl CounterRegistry {
    pub fn register(&mut self, counter: Arc<dyn TokenCounter>) {
        self.counters.insert(counter.scheme().to_string(), counter);
    }

    pub fn get(&self, scheme: &str) -> Result<Arc<dyn TokenCounter>, ConfigError> {
        self.counters
            .get(scheme)
            .cloned()
            .ok_or_else(|| ConfigError::UnknownScheme(scheme.to_string()))
    }

    pub fn schemes(&self) -> impl Iterator<Item = &str> {
        self.counters.keys().map(String::as_str)
    }
}

pub fn count_tokens(text: &str, scheme: &str) -> Result<usize, ConfigError> {
    Ok(CounterRegistry::default().get(scheme)?.count(text))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    #[serde(default)]
    pub weights: WeightTable,
    /// `L_min`; 0 disables the overshort penalty.
    #[serde(default = "default_l_min")]
    pub l_min: u32,
    #[serde(default = "default_epsilon")]
    pub epsilon_group: f64,
    #[serde(default = "default_scheme")]
    pub token_scheme: String,
}

fn default_l_min() -> u32 {
    DEFAULT_L_MIN
}
fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}
fn default_scheme() -> String {
    DEFAULT_TOKEN_SCHEME.to_string()
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            weights: WeightTable::equal(),
            l_min: DEFAULT_L_MIN,
            epsilon_group: DEFAULT_EPSILON,
            token_scheme: default_scheme(),
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.epsilon_group.is_finite() && self.epsilon_group > 0.0) {
            return Err(ConfigError::Epsilon(self.epsilon_group));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the config's JSON form.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// All reward components for one completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_cor: f64,
    pub r_fmt: u8,
    pub r_len: f64,
    pub reward: f64,
    pub predicted: LabelSet,
    pub format_ok: bool,
    pub token_count: usize,
    pub token_scheme: String,
    pub diagnostics: Vec<String>,
}

/// Weighted IoU of two label sets. Both-empty (or zero-weight union) is 1.
pub fn correctness_reward(predicted: LabelSet, gold: LabelSet, weights: &WeightTable) -> f64 {
    // `Sum` for floats starts at -0.0; fold from +0.0 so disjoint sets score 0.
    let weigh = |s: LabelSet| s.iter().fold(0.0, |acc, c| acc + weights.get(c));
    let union = weigh(predicted.union(gold));
    if union == 0.0 {
        return 1.0;
    }
    weigh(predicted.intersection(gold)) / union
}

pub fn format_reward(text: &str) -> u8 {
    u8::from(crate::completion::validate_format(text).ok)
}

/// `min(0, (L - L_min) / L_min)`, or 0 when `l_min == 0`.
pub fn length_reward(token_count: usize, l_min: u32) -> f64 {
    if l_min == 0 || token_count >= l_min as usize {
        return 0.0;
    }
    let l_min = f64::from(l_min);
    (token_count as f64 - l_min) / l_min
}

/// Scores one completion with the built-in counter registry.
pub fn composite_reward(
    completion: &Completion,
    gold: LabelSet,
    config: &RewardConfig,
    ontology: &Ontology,
) -> Result<RewardBreakdown, ConfigError> {
    config.validate()?;
    let counter = CounterRegistry::default().get(&config.token_scheme)?;
    Ok(score_with(completion.text.as_str(), gold, config, ontology, counter.as_ref()))
}

fn score_with(
    text: &str,
    gold: LabelSet,
    config: &RewardConfig,
    ontology: &Ontology,
    counter: &dyn TokenCounter,
) -> RewardBreakdown {
    let parsed = parse_completion(text, ontology);
    let token_count = counter.count(text);
    let r_cor = correctness_reward(parsed.predicted, gold, &config.weights);
    let r_fmt = u8::from(parsed.format_ok);
    let r_len = length_reward(token_count, config.l_min);
    RewardBreakdown {
        r_cor,
        r_fmt,
        r_len,
        reward: r_cor * f64::from(r_fmt) + r_len,
        predicted: parsed.predicted,
        format_ok: parsed.format_ok,
        token_count,
        token_scheme: counter.scheme().to_string(),
        diagnostics: parsed.diagnostics,
    }
}

/// A validated config bound to an ontology and a resolved token counter.
#[derive(Clone)]
pub struct RewardEngine {
    ontology: Arc<Ontology>,
    config: RewardConfig,
    counter: Arc<dyn TokenCounter>,
}

impl std::fmt::Debug for RewardEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RewardEngine").field("config", &self.config).finish_non_exhaustive()
    }
}

impl RewardEngine {
    pub fn new(config: RewardConfig, ontology: Arc<Ontology>) -> Result<Self, ConfigError> {
        Self::with_registry(config, ontology, &CounterRegistry::default())
    }

    /// Engine over the built-in ontology.
    pub fn builtin(config: RewardConfig) -> Result<Self, ConfigError> {
        Self::new(config, Ontology::shared_builtin().clone())
    }

    pub fn with_registry(
        config: RewardConfig,
        ontology: Arc<Ontology>,
        registry: &CounterRegistry,
    ) -> Result<Self, ConfigError> {
        config.validate()?;
        let counter = registry.get(&config.token_scheme)?;
        Ok(RewardEngine { ontology, config, counter })
    }

    pub fn config(&self) -> &RewardConfig {
        &self.config
    }

    pub fn ontology(&self) -> &Ontology {
        &self.ontology
    }

    pub fn count_tokens(&self, text: &str) -> usize {
        self.counter.count(text)
    }

    pub fn score(&self, text: &str, gold: LabelSet) -> RewardBreakdown {
        score_with(text, gold, &self.config, &self.ontology, self.counter.as_ref())
    }

    /// Scores `completion` and records its token count.
    pub fn score_completion(&self, completion: &mut Completion, gold: LabelSet) -> RewardBreakdown {
        let b = self.score(&completion.text, gold);
        completion.token_count = b.token_count;
        b
    }

    /// Parallel batch scoring; output order matches input order.
    pub fn score_batch<T: AsRef<str> + Sync>(&self, items: &[(T, LabelSet)]) -> Vec<RewardBreakdown> {
        items.par_iter().map(|(text, gold)| self.score(text.as_ref(), *gold)).collect()
    }
}
