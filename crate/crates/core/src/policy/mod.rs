//! A small decoder-only transformer policy with hand-written backpropagation.
//!
//! Pre-norm blocks (layer norm → causal self-attention → residual, layer
//! norm → GELU MLP → residual), learned positional embeddings and a final
//! layer norm before the output projection. All parameters live in one flat
//! `f64` vector described by [`ParamLayout`], which makes snapshots, freezing
//! and finite-difference checks straightforward.
//!
//! Several responses to the same prompt are evaluated together as a *tree*:
//! the prompt rows are computed once and every response attends to them. The
//! result is identical to running each (prompt, response) pair on its own.

mod decode;
mod forward;
pub mod layout;
mod optim;
mod snapshot;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::TokenId;

pub use decode::{Rollout, SamplingConfig};
pub use layout::ParamLayout;
pub use optim::{apply_gradient, Optimizer, OptimizerKind};
pub use snapshot::{PolicySnapshot, SNAPSHOT_FORMAT_VERSION};

pub(crate) use forward::{Forward, TreeShape};

pub const MIN_VOCAB_SIZE: usize = 4;
pub const MIN_CONTEXT_WINDOW: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    /// Maximum prompt + response tokens.
    pub context_window: usize,
    pub d_model: usize,
    pub n_layers: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    /// Hidden width of the MLP as a multiple of `d_model`.
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    pub seed: u64,
}

fn default_heads() -> usize {
    1
}

fn default_ffn_mult() -> usize {
    4
}

impl PolicyConfig {
    /// The default architecture: two layers, width 64, one attention head.
    pub fn new(vocab_size: usize, context_window: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            context_window,
            d_model: 64,
            n_layers: 2,
            n_heads: default_heads(),
            ffn_mult: default_ffn_mult(),
            seed,
        }
    }

    /// A very small configuration for tests and gradient checks.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            context_window: 16,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_mult: 2,
            seed: 7,
        }
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < MIN_VOCAB_SIZE {
            return Err(Error::Config(format!(
                "vocab_size must be >= {MIN_VOCAB_SIZE}, got {}",
                self.vocab_size
            )));
        }
        if self.context_window < MIN_CONTEXT_WINDOW {
            return Err(Error::Config(format!(
                "context_window must be >= {MIN_CONTEXT_WINDOW}, got {}",
                self.context_window
            )));
        }
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.ffn_mult == 0 {
            return Err(Error::Config(
                "d_model, n_layers, n_heads and ffn_mult must be positive".into(),
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// The two freezable halves of the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// Token and position embeddings plus the lower half of the blocks.
    Encoder,
    /// Upper half of the blocks, final norm and output projection.
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 2] = [ParamGroup::Encoder, ParamGroup::Head];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Head => "head",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(ParamGroup::Encoder),
            "head" => Ok(ParamGroup::Head),
            other => Err(Error::Config(format!("unknown parameter group {other:?}"))),
        }
    }
}

pub type FreezeSet = BTreeSet<ParamGroup>;

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    config: PolicyConfig,
    layout: ParamLayout,
    params: Vec<f64>,
}

// Small embeddings let Adam move them quickly relative to their scale.
const EMBED_STD: f64 = 0.1;

/// Deterministically initialize a policy from `config.seed`.
pub fn init_policy(config: PolicyConfig) -> Result<Policy> {
    config.validate()?;
    let layout = ParamLayout::new(&config);
    let mut params = vec![0.0; layout.total];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d_model as f64;
    let f = config.ffn_dim() as f64;
    let depth_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();

    let mut fill = |params: &mut [f64], t: layout::Tensor, std: f64| {
        let normal = Normal::new(0.0, std).expect("positive std");
        for p in &mut params[t.range()] {
            *p = normal.sample(&mut rng);
        }
    };
    fill(&mut params, layout.tok_emb, EMBED_STD);
    fill(&mut params, layout.pos_emb, EMBED_STD);
    for b in &layout.blocks {
        fill(&mut params, b.w_qkv, 1.0 / d.sqrt());
        fill(&mut params, b.w_proj, depth_scale / d.sqrt());
        fill(&mut params, b.w_fc, 1.0 / d.sqrt());
        fill(&mut params, b.w_out, depth_scale / f.sqrt());
    }
    // Small output weights keep the untrained policy close to uniform.
    fill(&mut params, layout.w_unembed, 0.1 / d.sqrt());

    let mut set = |t: layout::Tensor, value: f64| params[t.range()].fill(value);
    for b in &layout.blocks {
        set(b.ln1_gain, 1.0);
        set(b.ln2_gain, 1.0);
    }
    set(layout.lnf_gain, 1.0);

    Ok(Policy {
        config,
        layout,
        params,
    })
}

impl Policy {
    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn group_range(&self, group: ParamGroup) -> std::ops::Range<usize> {
        match group {
            ParamGroup::Encoder => self.layout.encoder_range(),
            ParamGroup::Head => self.layout.head_range(),
        }
    }

    pub fn group_params(&self, group: ParamGroup) -> &[f64] {
        &self.params[self.group_range(group)]
    }

    /// Rebuild a policy around an existing parameter vector.
    pub fn from_parts(config: PolicyConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.total {
            return Err(Error::IncompatibleSnapshot(format!(
                "config expects {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub(crate) fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if let Some(t) = tokens
            .iter()
            .find(|t| **t as usize >= self.config.vocab_size)
        {
            return Err(Error::InvalidInput(format!(
                "token id {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    pub(crate) fn check_length(&self, len: usize) -> Result<()> {
        if len > self.config.context_window {
            return Err(Error::SequenceTooLong {
                len,
                window: self.config.context_window,
            });
        }
        Ok(())
    }

    /// Run the prompt once and every response on top of it, keeping the
    /// activations needed for backpropagation.
    pub(crate) fn forward_group(
        &self,
        prompt: &[TokenId],
        responses: &[&[TokenId]],
    ) -> Result<Forward> {
        if prompt.is_empty() {
            return Err(Error::InvalidInput("prompt must not be empty".into()));
        }
        self.check_tokens(prompt)?;
        for r in responses {
            self.check_tokens(r)?;
            self.check_length(prompt.len() + r.len())?;
        }
        self.check_length(prompt.len())?;
        let shape = TreeShape::new(prompt.len(), responses.iter().map(|r| r.len()));
        let mut tokens: Vec<usize> = prompt.iter().map(|&t| t as usize).collect();
        for r in responses {
            tokens.extend(r.iter().map(|&t| t as usize));
        }
        Ok(forward::forward(self, shape, tokens))
    }

    /// `log π(response_t | prompt, response_<t)` for every response position.
    pub fn log_probs(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self
            .group_log_probs(prompt, &[response])?
            .pop()
            .expect("one response"))
    }

    /// [`Policy::log_probs`] for several responses sharing one prompt.
    pub fn group_log_probs(
        &self,
        prompt: &[TokenId],
        responses: &[&[TokenId]],
    ) -> Result<Vec<Vec<f64>>> {
        let fwd = self.forward_group(prompt, responses)?;
        Ok(fwd.response_log_probs())
    }

    /// Full next-token log distribution after `context` (used by tests and
    /// diagnostics).
    pub fn next_token_log_probs(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        let fwd = self.forward_group(context, &[])?;
        Ok(fwd.row_log_probs(context.len() - 1).to_vec())
    }

    /// Gradient of `-Σ weight_{i,t} · log π(o_{i,t})` added into `grad`.
    ///
    /// With weights from [`crate::grpo::grpo_loss`] this is the gradient of the
    /// GRPO loss; with `1/n` weights it is the mean cross-entropy gradient.
    pub fn accumulate_gradient(
        &self,
        prompt: &[TokenId],
        responses: &[&[TokenId]],
        token_weights: &[Vec<f64>],
        freeze: &FreezeSet,
        grad: &mut [f64],
    ) -> Result<()> {
        if responses.len() != token_weights.len() {
            return Err(Error::InvalidInput(format!(
                "{} responses but {} weight vectors",
                responses.len(),
                token_weights.len()
            )));
        }
        for (r, w) in responses.iter().zip(token_weights) {
            if r.len() != w.len() {
                return Err(Error::InvalidInput(format!(
                    "response of {} tokens has {} weights",
                    r.len(),
                    w.len()
                )));
            }
        }
        if grad.len() != self.params.len() {
            return Err(Error::InvalidInput("gradient buffer has wrong size".into()));
        }
        let fwd = self.forward_group(prompt, responses)?;
        fwd.backward(self, token_weights, freeze, grad);
        Ok(())
    }

    /// Sample one response autoregressively.
    pub fn sample(
        &self,
        prompt: &[TokenId],
        temperature: f64,
        max_len: usize,
        stop_token: TokenId,
        rng_seed: u64,
    ) -> Result<Rollout> {
        let cfg = SamplingConfig {
            temperature,
            max_len,
            stop_token,
        };
        Ok(self
            .sample_group(prompt, &cfg, &[rng_seed])?
            .pop()
            .expect("one rollout"))
    }

    /// Sample one response per seed, decoding them in lockstep. Each rollout
    /// equals what [`Policy::sample`] returns for its seed.
    pub fn sample_group(
        &self,
        prompt: &[TokenId],
        cfg: &SamplingConfig,
        seeds: &[u64],
    ) -> Result<Vec<Rollout>> {
        decode::sample_group(self, prompt, cfg, seeds)
    }
}
