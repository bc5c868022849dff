//! Group-relative policy optimization (GRPO) with rule-based rewards for a
//! small autoregressive policy on synthetic spatial-reasoning questions.
//!
//! Modules, bottom-up:
//!
//! * [`grpo`]: group-normalized advantages, clipped surrogate, k3 KL penalty.
//! * [`policy`]: a from-scratch decoder-only transformer with exact gradients.
//! * [`taskgen`]: scenes, questions, prompts, the tokenizer and dataset files.
//! * [`reward`]: the accuracy / format / length-bonus reward rules.
//! * [`trainer`]: GRPO and SFT training loops and the ablation recipes.
//! * [`eval`]: benchmark scoring, training dynamics and run comparison.

pub mod error;
pub mod eval;
pub mod grpo;
pub mod policy;
pub mod reward;
pub mod taskgen;
pub mod trainer;

pub use error::{Error, Result};

/// Index of a token in the shared vocabulary.
pub type TokenId = u32;
