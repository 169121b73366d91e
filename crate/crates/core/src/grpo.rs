//! Group-relative advantages and the GRPO objective.
//!
//! For a group of `G` rewards, `r̃_i = (r_i - μ) / (σ + ε)` with `μ` the mean
//! and `σ` the population standard deviation. The loss is
//!
//! ```text
//! L = -mean_over_groups[ (1/G) Σ_i r̃_i · logπ(y_i | x) ] + β · KL(π ‖ π_ref)
//! ```
//!
//! where `logπ(y_i | x)` is the summed token log-probability of completion `i`.
//! With `β = 0` the KL term is not evaluated at all.

use serde::{Deserialize, Serialize};

use crate::completion::Completion;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GrpoError {
    #[error("group has {0} rewards; at least 2 are required")]
    GroupTooSmall(usize),
    #[error("reward {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("epsilon must be finite and > 0, got {0}")]
    Epsilon(f64),
    #[error("beta must be finite and >= 0, got {0}")]
    Beta(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("log-probability {index} is {value}; log-probabilities must be finite and <= 0")]
    LogProb { index: usize, value: f64 },
    #[error("distributions have different supports ({0} vs {1} outcomes)")]
    SupportMismatch(usize, usize),
    #[error("distribution is not normalized: {0}")]
    NotNormalized(String),
    #[error("KL divergence is infinite: reference assigns 0 to outcome {0} which has positive mass")]
    Divergent(usize),
    #[error("no groups given")]
    Empty,
}

/// `G` completions for one prompt with their rewards and, once normalized,
/// advantages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub prompt_id: String,
    pub completions: Vec<Completion>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl Group {
    pub fn new(
        prompt_id: impl Into<String>,
        completions: Vec<Completion>,
        rewards: Vec<f64>,
    ) -> Result<Self, GrpoError> {
        if completions.len() != rewards.len() {
            return Err(GrpoError::Shape(format!(
                "{} completions but {} rewards",
                completions.len(),
                rewards.len()
            )));
        }
        if rewards.len() < 2 {
            return Err(GrpoError::GroupTooSmall(rewards.len()));
        }
        Ok(Group { prompt_id: prompt_id.into(), completions, rewards, advantages: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn normalize(&mut self, epsilon: f64) -> Result<&[f64], GrpoError> {
        self.advantages = normalize_group(&self.rewards, epsilon)?;
        Ok(&self.advantages)
    }
}

/// Normalizes rewards within a group.
///
/// Uses a corrected two-pass mean so that the advantages sum to zero up to
/// rounding in the deviations, not in the rewards. Identical rewards give
/// exactly zero advantages.
pub fn normalize_group(rewards: &[f64], epsilon: f64) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(GrpoError::Epsilon(epsilon));
    }
    if let Some((index, &value)) = rewards.iter().enumerate().find(|(_, r)| !r.is_finite()) {
        return Err(GrpoError::NonFinite { index, value });
    }
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }

    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let mut dev: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    let correction = dev.iter().sum::<f64>() / n;
    for d in &mut dev {
        *d -= correction;
    }

    // Scale before squaring so that large rewards cannot overflow.
    let scale = dev.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let sigma = if scale == 0.0 {
        0.0
    } else {
        scale * (dev.iter().map(|d| (d / scale).powi(2)).sum::<f64>() / n).sqrt()
    };
    let denom = sigma + epsilon;
    Ok(dev.into_iter().map(|d| d / denom).collect())
}

/// Policy log-probabilities for one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyLogProbs {
    /// `Σ_t log π(y_{i,t} | x, y_{i,<t})` for each completion in the group.
    pub per_completion: Vec<f64>,
    /// Policy and reference distributions over the prompt's candidate set,
    /// needed only when `β > 0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl_anchor: Option<KlAnchor>,
}

impl PolicyLogProbs {
    pub fn new(per_completion: Vec<f64>) -> Self {
        PolicyLogProbs { per_completion, kl_anchor: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlAnchor {
    pub policy: Vec<f64>,
    pub reference: Vec<f64>,
}

/// GRPO loss averaged over groups, summed in group order.
pub fn grpo_loss(groups: &[Group], logprobs: &[PolicyLogProbs], beta: f64) -> Result<f64, GrpoError> {
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(GrpoError::Beta(beta));
    }
    if groups.is_empty() {
        return Err(GrpoError::Empty);
    }
    if groups.len() != logprobs.len() {
        return Err(GrpoError::Shape(format!(
            "{} groups but {} log-probability sets",
            groups.len(),
            logprobs.len()
        )));
    }
    let mut total = 0.0;
    for (gi, (group, lp)) in groups.iter().zip(logprobs).enumerate() {
        let g = group.len();
        if group.advantages.len() != g || lp.per_completion.len() != g {
            return Err(GrpoError::Shape(format!(
                "group {gi}: {g} rewards, {} advantages, {} log-probabilities",
                group.advantages.len(),
                lp.per_completion.len()
            )));
        }
        if let Some((index, &value)) =
            lp.per_completion.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v <= 0.0))
        {
            return Err(GrpoError::LogProb { index, value });
        }
        let weighted: f64 = group.advantages.iter().zip(&lp.per_completion).map(|(a, l)| a * l).sum();
        let mut term = -weighted / g as f64;
        if beta > 0.0 {
            let anchor = lp.kl_anchor.as_ref().ok_or_else(|| {
                GrpoError::Shape(format!("group {gi}: beta > 0 requires a KL anchor"))
            })?;
            term += beta * kl_divergence(&anchor.policy, &anchor.reference)?;
        }
        total += term;
    }
    Ok(total / groups.len() as f64)
}

const NORMALIZATION_TOL: f64 = 1e-9;

/// `KL(p ‖ q) = Σ p·ln(p/q)` for categorical distributions on a shared finite
/// support.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64, GrpoError> {
    if p.len() != q.len() || p.is_empty() {
        return Err(GrpoError::SupportMismatch(p.len(), q.len()));
    }
    for (name, dist) in [("p", p), ("q", q)] {
        if let Some(v) = dist.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(GrpoError::NotNormalized(format!("{name} has entry {v}")));
        }
        let sum: f64 = dist.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(GrpoError::NotNormalized(format!("{name} sums to {sum}")));
        }
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(GrpoError::Divergent(i));
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl.max(0.0))
}
