//! Desk-scale GRPO on a categorical policy over enumerated candidates.
//!
//! Each prompt has a fixed list of full tagged completions. The policy is
//! `softmax(θ / T)` over that list, so a whole completion is one macro-step and
//! its summed log-probability is `log softmax(θ / T)_y`. Everything else is the
//! real machinery: the reward engine scores candidates, groups are sampled
//! with a seeded generator, advantages are normalized per group and the logits
//! follow plain gradient descent on the GRPO loss (β = 0).

use std::collections::HashSet;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::completion::{parse_completion, Completion};
use crate::grpo::{grpo_loss, normalize_group, Group, GrpoError, PolicyLogProbs};
use crate::ontology::{LabelSet, Ontology};
use crate::reward::{ConfigError, RewardConfig, RewardEngine};

const DEFAULT_TASK: &str = include_str!("../data/demo_task.toml");

#[derive(Debug, thiserror::Error)]
pub enum ToyError {
    #[error("task: {0}")]
    Task(String),
    #[error("unknown prompt {0:?}")]
    UnknownPrompt(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Reward(#[from] ConfigError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error("reading task {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyPrompt {
    pub id: String,
    pub gold: LabelSet,
    pub candidates: Vec<String>,
    /// Index of the candidate tracked as "correct". When absent, the unique
    /// candidate that parses to `gold` with a valid format.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyTask {
    #[serde(default)]
    pub name: String,
    pub prompts: Vec<ToyPrompt>,
}

impl ToyTask {
    pub fn from_toml_str(text: &str) -> Result<Self, ToyError> {
        let task: ToyTask = toml::from_str(text).map_err(|e| ToyError::Task(e.to_string()))?;
        task.validate(Ontology::builtin())?;
        Ok(task)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ToyError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ToyError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text)
    }

    /// Five prompts with four candidates each (correct, partial, wrong,
    /// malformed).
    pub fn default_demo() -> Self {
        Self::from_toml_str(DEFAULT_TASK).expect("bundled demo task is valid")
    }

    pub fn default_demo_toml() -> &'static str {
        DEFAULT_TASK
    }

    /// Prompts with two candidates that give the same answer after a short
    /// or a long reasoning section. The long one is the target.
    pub fn overshort_demo() -> Self {
        let regions = [
            "I check image quality and projection first.",
            "Next I look for medical devices and lines.",
            "The trachea and main bronchi are assessed for patency.",
            "I review the right upper, middle and lower lobes in turn.",
            "Then the left upper and lower lobes are compared with the right.",
            "The pleural spaces and costophrenic angles are inspected.",
            "I evaluate the mediastinal contour and both hila.",
            "The cardiac silhouette is measured against the thoracic width.",
            "Below the diaphragm I look for free air.",
            "Finally the ribs, clavicles and soft tissues are reviewed.",
        ];
        let search = regions.join(" ");
        let long_think = std::iter::repeat_n(search.as_str(), 5).collect::<Vec<_>>().join(" ");
        let cases = [
            ("len-001", "No Finding", "Unremarkable study."),
            ("len-002", "Cardiomegaly", "Heart looks big."),
            ("len-003", "Pleural Effusion", "Left base is blunted."),
        ];
        let prompts = cases
            .iter()
            .map(|(id, answer, short)| ToyPrompt {
                id: id.to_string(),
                gold: LabelSet::from_names([answer]).expect("canonical name"),
                candidates: vec![
                    format!("<think>{short}</think> <answer>{answer}</answer>"),
                    format!("<think>{long_think} {short}</think> <answer>{answer}</answer>"),
                ],
                target: Some(1),
            })
            .collect();
        let task = ToyTask { name: "overshort".into(), prompts };
        task.validate(Ontology::builtin()).expect("overshort demo is valid");
        task
    }

    pub fn validate(&self, ontology: &Ontology) -> Result<(), ToyError> {
        if self.prompts.is_empty() {
            return Err(ToyError::Task("no prompts".into()));
        }
        let mut ids = HashSet::new();
        for p in &self.prompts {
            if !ids.insert(p.id.as_str()) {
                return Err(ToyError::Task(format!("duplicate prompt id {:?}", p.id)));
            }
            if p.candidates.len() < 2 {
                return Err(ToyError::Task(format!("prompt {:?} needs at least 2 candidates", p.id)));
            }
            let distinct: HashSet<&String> = p.candidates.iter().collect();
            if distinct.len() != p.candidates.len() {
                return Err(ToyError::Task(format!("prompt {:?} has duplicate candidates", p.id)));
            }
            p.correct_index(ontology)?;
        }
        Ok(())
    }

    pub fn prompt_index(&self, id: &str) -> Option<usize> {
        self.prompts.iter().position(|p| p.id == id)
    }
}

impl ToyPrompt {
    fn parses_to_gold(&self, k: usize, ontology: &Ontology) -> bool {
        let r = parse_completion(&self.candidates[k], ontology);
        r.format_ok && r.predicted == self.gold
    }

    pub fn correct_index(&self, ontology: &Ontology) -> Result<usize, ToyError> {
        if let Some(t) = self.target {
            if t >= self.candidates.len() || !self.parses_to_gold(t, ontology) {
                return Err(ToyError::Task(format!(
                    "prompt {:?}: target {t} is not a well-formed candidate matching gold",
                    self.id
                )));
            }
            return Ok(t);
        }
        let matching: Vec<usize> =
            (0..self.candidates.len()).filter(|&k| self.parses_to_gold(k, ontology)).collect();
        match matching.as_slice() {
            [k] => Ok(*k),
            other => Err(ToyError::Task(format!(
                "prompt {:?}: expected exactly one candidate matching gold, found {}",
                self.id,
                other.len()
            ))),
        }
    }
}

/// Per-prompt logits and a temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    pub logits: Vec<Vec<f64>>,
    pub temperature: f64,
}

impl ToyPolicy {
    pub fn uniform(task: &ToyTask) -> Self {
        ToyPolicy {
            logits: task.prompts.iter().map(|p| vec![0.0; p.candidates.len()]).collect(),
            temperature: 1.0,
        }
    }

    pub fn probabilities(&self, prompt: usize) -> Vec<f64> {
        softmax(&self.logits[prompt], self.temperature)
    }
}

pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, x| m.max(*x));
    let exps: Vec<f64> = logits.iter().map(|x| ((x - max) / temperature).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|x| x / temperature).collect();
    let max = scaled.iter().fold(f64::NEG_INFINITY, |m, x| m.max(*x));
    let lse = max + scaled.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    scaled.into_iter().map(|x| (x - lse).min(0.0)).collect()
}

/// Draws `g` i.i.d. candidate indices from `probs`.
pub fn sample_indices(probs: &[f64], g: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let dist = WeightedIndex::new(probs).expect("probabilities are finite and not all zero");
    (0..g).map(|_| dist.sample(rng)).collect()
}

/// Gradient of the single-group GRPO loss (β = 0) with respect to the logits:
/// `-(1/G) Σ_i r̃_i (onehot(y_i) - softmax(θ/T)) / T`.
pub fn analytic_gradient(
    logits: &[f64],
    temperature: f64,
    samples: &[usize],
    advantages: &[f64],
) -> Result<Vec<f64>, GrpoError> {
    if samples.len() != advantages.len() {
        return Err(GrpoError::Shape(format!(
            "{} samples but {} advantages",
            samples.len(),
            advantages.len()
        )));
    }
    if let Some(&s) = samples.iter().find(|&&s| s >= logits.len()) {
        return Err(GrpoError::Shape(format!("sample index {s} out of range for {} candidates", logits.len())));
    }
    let probs = softmax(logits, temperature);
    let g = samples.len() as f64;
    let adv_sum: f64 = advantages.iter().sum();
    let mut grad: Vec<f64> = probs.iter().map(|p| adv_sum * p).collect();
    for (&s, &a) in samples.iter().zip(advantages) {
        grad[s] -= a;
    }
    Ok(grad.into_iter().map(|x| x / (g * temperature)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub group_size: usize,
    pub temperature: f64,
    pub seed: u64,
    pub reward: RewardConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.5,
            steps: 200,
            group_size: 16,
            temperature: 1.0,
            seed: 7,
            reward: RewardConfig { l_min: 0, ..RewardConfig::default() },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ToyError> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(ToyError::Config(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.group_size < 2 {
            return Err(ToyError::Config(format!("group size must be >= 2, got {}", self.group_size)));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(ToyError::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        self.reward.validate()?;
        Ok(())
    }
}

/// Policy state after `step` updates. `loss` and `sampled_reward` describe the
/// batch that produced the update and are absent for step 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: Option<f64>,
    pub sampled_reward: Option<f64>,
    /// Exact expected reward under the policy, averaged over prompts.
    pub mean_reward: f64,
    pub p_correct: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub prompt_ids: Vec<String>,
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn last(&self) -> &TrainRecord {
        self.records.last().expect("a log always holds the initial record")
    }

    pub fn final_mean_p_correct(&self) -> f64 {
        let p = &self.last().p_correct;
        p.iter().sum::<f64>() / p.len() as f64
    }
}

/// A task bound to a reward engine, with every candidate pre-scored.
#[derive(Debug, Clone)]
pub struct ToyLab {
    task: ToyTask,
    engine: RewardEngine,
    rewards: Vec<Vec<f64>>,
    correct: Vec<usize>,
}

impl ToyLab {
    pub fn new(task: ToyTask, reward: RewardConfig) -> Result<Self, ToyError> {
        Self::with_engine(task, RewardEngine::new(reward, Ontology::shared_builtin().clone())?)
    }

    pub fn with_engine(task: ToyTask, engine: RewardEngine) -> Result<Self, ToyError> {
        task.validate(engine.ontology())?;
        let rewards = task
            .prompts
            .iter()
            .map(|p| p.candidates.iter().map(|c| engine.score(c, p.gold).reward).collect())
            .collect();
        let correct = task
            .prompts
            .iter()
            .map(|p| p.correct_index(engine.ontology()))
            .collect::<Result<_, _>>()?;
        Ok(ToyLab { task, engine, rewards, correct })
    }

    pub fn task(&self) -> &ToyTask {
        &self.task
    }

    pub fn candidate_rewards(&self, prompt: usize) -> &[f64] {
        &self.rewards[prompt]
    }

    pub fn correct_index(&self, prompt: usize) -> usize {
        self.correct[prompt]
    }

    /// Samples `g` completions for `prompt_id` and scores them. Advantages
    /// are left empty.
    pub fn sample_group(
        &self,
        policy: &ToyPolicy,
        prompt_id: &str,
        g: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Group, Vec<usize>), ToyError> {
        let p = self
            .task
            .prompt_index(prompt_id)
            .ok_or_else(|| ToyError::UnknownPrompt(prompt_id.to_string()))?;
        let samples = sample_indices(&policy.probabilities(p), g, rng);
        let prompt = &self.task.prompts[p];
        let completions = samples
            .iter()
            .map(|&k| {
                let mut c = Completion::new(format!("{prompt_id}#{k}"), prompt.candidates[k].clone());
                c.token_count = self.engine.count_tokens(&c.text);
                c
            })
            .collect();
        let rewards = samples.iter().map(|&k| self.rewards[p][k]).collect();
        Ok((Group::new(prompt_id, completions, rewards)?, samples))
    }

    fn record(&self, policy: &ToyPolicy, step: usize, loss: Option<f64>, sampled: Option<f64>) -> TrainRecord {
        let n = self.task.prompts.len() as f64;
        let mut expected = 0.0;
        let mut p_correct = Vec::with_capacity(self.task.prompts.len());
        for p in 0..self.task.prompts.len() {
            let probs = policy.probabilities(p);
            expected += probs.iter().zip(&self.rewards[p]).map(|(a, b)| a * b).sum::<f64>();
            p_correct.push(probs[self.correct[p]]);
        }
        TrainRecord { step, loss, sampled_reward: sampled, mean_reward: expected / n, p_correct }
    }

    /// Runs GRPO from the uniform policy.
    pub fn train(&self, cfg: &TrainConfig) -> Result<(TrainLog, ToyPolicy), ToyError> {
        cfg.validate()?;
        let mut policy = ToyPolicy { temperature: cfg.temperature, ..ToyPolicy::uniform(&self.task) };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n_prompts = self.task.prompts.len();
        let mut records = vec![self.record(&policy, 0, None, None)];

        for step in 1..=cfg.steps {
            let mut groups = Vec::with_capacity(n_prompts);
            let mut logprobs = Vec::with_capacity(n_prompts);
            let mut grads = Vec::with_capacity(n_prompts);
            let mut reward_sum = 0.0;
            for (p, prompt) in self.task.prompts.iter().enumerate() {
                let (mut group, samples) = self.sample_group(&policy, &prompt.id, cfg.group_size, &mut rng)?;
                reward_sum += group.rewards.iter().sum::<f64>();
                group.normalize(cfg.reward.epsilon_group)?;
                let lsm = log_softmax(&policy.logits[p], policy.temperature);
                logprobs.push(PolicyLogProbs::new(samples.iter().map(|&k| lsm[k]).collect()));
                grads.push(analytic_gradient(&policy.logits[p], policy.temperature, &samples, &group.advantages)?);
                groups.push(group);
            }
            let loss = grpo_loss(&groups, &logprobs, 0.0)?;
            // The loss averages over prompts, so each prompt's gradient is
            // scaled by 1/P.
            let scale = cfg.learning_rate / n_prompts as f64;
            for (logits, grad) in policy.logits.iter_mut().zip(&grads) {
                for (l, g) in logits.iter_mut().zip(grad) {
                    *l -= scale * g;
                }
            }
            let sampled = reward_sum / (n_prompts * cfg.group_size) as f64;
            records.push(self.record(&policy, step, Some(loss), Some(sampled)));
        }

        let log = TrainLog {
            seed: cfg.seed,
            prompt_ids: self.task.prompts.iter().map(|p| p.id.clone()).collect(),
            records,
        };
        Ok((log, policy))
    }
}

/// Normalized advantages for explicit samples, exposed for gradient checks.
pub fn advantages_for(rewards: &[f64], samples: &[usize], epsilon: f64) -> Result<Vec<f64>, GrpoError> {
    let r: Vec<f64> = samples.iter().map(|&k| rewards[k]).collect();
    normalize_group(&r, epsilon)
}
