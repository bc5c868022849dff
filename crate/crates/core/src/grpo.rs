//! Group-relative advantages and the clipped, KL-regularized GRPO objective.
//!
//! Everything here works on plain per-token log-probabilities, so it is
//! independent of the policy architecture. The objective being maximized is
//!
//! ```text
//! J = 1/G Σ_i 1/|o_i| Σ_t [ min(ρ_t Â_i, clip(ρ_t, 1-ε, 1+ε) Â_i) - β k3_t ]
//! ρ_t  = exp(logπ_θ - logπ_old)
//! k3_t = exp(logπ_ref - logπ_θ) - (logπ_ref - logπ_θ) - 1
//! Â_i  = (r_i - mean(r)) / std(r)
//! ```
//!
//! [`grpo_loss`] returns `-J` together with, for every response token, the
//! weight `∂J/∂logπ_θ(o_{i,t})`. Any policy can then apply the chain rule by
//! accumulating `Σ weight · ∇_θ logπ_θ(o_{i,t})` and stepping along it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this population standard deviation a group carries no signal and all
/// advantages are zero.
pub const DEGENERATE_STD: f64 = 1e-8;

/// Rewards of one group together with their normalized advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageGroup {
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl AdvantageGroup {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn is_degenerate(&self) -> bool {
        self.std < DEGENERATE_STD
    }
}

/// Per-token log-probabilities of one response under the current, old
/// (sampling) and reference policies.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLogProbs {
    current: Vec<f64>,
    old: Vec<f64>,
    reference: Vec<f64>,
}

impl TokenLogProbs {
    pub fn new(current: Vec<f64>, old: Vec<f64>, reference: Vec<f64>) -> Result<Self> {
        if current.len() != old.len() || current.len() != reference.len() {
            return Err(Error::InvalidInput(format!(
                "misaligned log-prob vectors: current {}, old {}, reference {}",
                current.len(),
                old.len(),
                reference.len()
            )));
        }
        for (name, values) in [
            ("current", &current),
            ("old", &old),
            ("reference", &reference),
        ] {
            if let Some(v) = values.iter().find(|v| v.is_nan() || **v > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "{name} log-prob {v} is not a valid log-probability"
                )));
            }
        }
        Ok(Self {
            current,
            old,
            reference,
        })
    }

    /// Log-probs for a response sampled from the policy being updated, before
    /// any update: current and old coincide.
    pub fn on_policy(current: Vec<f64>, reference: Vec<f64>) -> Result<Self> {
        Self::new(current.clone(), current, reference)
    }

    pub fn current(&self) -> &[f64] {
        &self.current
    }

    pub fn old(&self) -> &[f64] {
        &self.old
    }

    pub fn reference(&self) -> &[f64] {
        &self.reference
    }

    pub fn len(&self) -> usize {
        self.current.len()
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_empty()
    }

    /// Replace the current-policy log-probs, e.g. after an inner epoch.
    pub fn with_current(&self, current: Vec<f64>) -> Result<Self> {
        Self::new(current, self.old.clone(), self.reference.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoHyper {
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub group_size: usize,
    pub inner_epochs: usize,
}

impl Default for GrpoHyper {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            kl_beta: 0.04,
            group_size: 8,
            inner_epochs: 1,
        }
    }
}

impl GrpoHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::Config(format!(
                "clip_epsilon must be in (0, 1), got {}",
                self.clip_epsilon
            )));
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return Err(Error::Config(format!(
                "kl_beta must be finite and >= 0, got {}",
                self.kl_beta
            )));
        }
        if self.group_size < 2 {
            return Err(Error::Config(format!(
                "group_size must be >= 2, got {}",
                self.group_size
            )));
        }
        if self.inner_epochs < 1 {
            return Err(Error::Config("inner_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// The GRPO update unit: G responses to one question with their advantages.
#[derive(Debug, Clone)]
pub struct GroupBatch {
    pub rollouts: Vec<TokenLogProbs>,
    pub advantages: AdvantageGroup,
}

/// Output of [`grpo_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct GrpoLoss {
    /// `-J`, the quantity to minimize.
    pub loss: f64,
    /// `∂J/∂logπ_θ(o_{i,t})`, shaped like the rollouts.
    pub token_weights: Vec<Vec<f64>>,
    /// Mean k3 estimate over all response tokens.
    pub mean_kl: f64,
    /// Fraction of response tokens whose surrogate gradient was clipped away.
    pub clip_fraction: f64,
    /// Rollouts with no tokens, excluded from the 1/G average.
    pub empty_rollouts: usize,
}

/// Group-normalized advantages using the population standard deviation.
pub fn compute_advantages(rewards: &[f64]) -> Result<AdvantageGroup> {
    if rewards.len() < 2 {
        return Err(Error::GroupTooSmall(rewards.len()));
    }
    if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite reward {r}")));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let advantages = if std < DEGENERATE_STD {
        vec![0.0; rewards.len()]
    } else {
        rewards.iter().map(|r| (r - mean) / std).collect()
    };
    Ok(AdvantageGroup {
        rewards: rewards.to_vec(),
        advantages,
        mean,
        std,
    })
}

/// Whether the unclipped branch of the surrogate is the one selected by the
/// min, i.e. whether the token still receives a policy-gradient signal.
fn surrogate_active(ratio: f64, advantage: f64, epsilon: f64) -> bool {
    if advantage > 0.0 {
        ratio < 1.0 + epsilon
    } else if advantage < 0.0 {
        ratio > 1.0 - epsilon
    } else {
        false
    }
}

fn surrogate(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage;
    unclipped.min(clipped)
}

/// `min(ρ_t Â, clip(ρ_t, 1-ε, 1+ε) Â)` for every token of one response.
pub fn per_token_surrogate(
    logprobs: &TokenLogProbs,
    advantage: f64,
    hyper: &GrpoHyper,
) -> Result<Vec<f64>> {
    if logprobs.is_empty() {
        return Err(Error::InvalidInput("empty log-prob vectors".into()));
    }
    Ok(logprobs
        .current
        .iter()
        .zip(&logprobs.old)
        .map(|(cur, old)| surrogate((cur - old).exp(), advantage, hyper.clip_epsilon))
        .collect())
}

/// k3 term for `x = logπ_ref - logπ_θ`, evaluated as `expm1(x) - x` to stay
/// nonnegative near zero.
fn k3(x: f64) -> f64 {
    (x.exp_m1() - x).max(0.0)
}

/// Per-token k3 estimate of `KL[π_θ || π_ref]`.
pub fn kl_penalty(logprobs: &TokenLogProbs) -> Result<Vec<f64>> {
    Ok(logprobs
        .current
        .iter()
        .zip(&logprobs.reference)
        .map(|(cur, r)| k3(r - cur))
        .collect())
}

/// Negated GRPO objective and its per-token gradient weights.
pub fn grpo_loss(batch: &GroupBatch, hyper: &GrpoHyper) -> Result<GrpoLoss> {
    let g = batch.rollouts.len();
    if g < 2 {
        return Err(Error::GroupTooSmall(g));
    }
    if batch.advantages.len() != g {
        return Err(Error::InvalidInput(format!(
            "{} rollouts but {} advantages",
            g,
            batch.advantages.len()
        )));
    }
    let eps = hyper.clip_epsilon;
    let beta = hyper.kl_beta;

    let non_empty = batch.rollouts.iter().filter(|r| !r.is_empty()).count();
    let empty_rollouts = g - non_empty;
    if empty_rollouts > 0 {
        tracing::warn!(empty_rollouts, "empty responses excluded from GRPO average");
    }

    let mut objective = 0.0;
    let mut kl_sum = 0.0;
    let mut clipped = 0usize;
    let mut tokens = 0usize;
    let mut token_weights = Vec::with_capacity(g);
    for (lp, &adv) in batch.rollouts.iter().zip(&batch.advantages.advantages) {
        if lp.is_empty() {
            token_weights.push(Vec::new());
            continue;
        }
        let scale = 1.0 / (non_empty as f64 * lp.len() as f64);
        let mut seq_objective = 0.0;
        let mut weights = Vec::with_capacity(lp.len());
        for ((cur, old), r) in lp.current.iter().zip(&lp.old).zip(&lp.reference) {
            let ratio = (cur - old).exp();
            let log_ref_ratio = r - cur;
            let kl = k3(log_ref_ratio);
            seq_objective += surrogate(ratio, adv, eps) - beta * kl;
            kl_sum += kl;

            let mut w = beta * log_ref_ratio.exp_m1();
            if surrogate_active(ratio, adv, eps) {
                w += ratio * adv;
            } else if adv != 0.0 {
                clipped += 1;
            }
            weights.push(w * scale);
        }
        tokens += lp.len();
        objective += seq_objective * scale;
        token_weights.push(weights);
    }

    let (mean_kl, clip_fraction) = if tokens > 0 {
        (kl_sum / tokens as f64, clipped as f64 / tokens as f64)
    } else {
        (0.0, 0.0)
    };
    Ok(GrpoLoss {
        loss: -objective,
        token_weights,
        mean_kl,
        clip_fraction,
        empty_rollouts,
    })
}
