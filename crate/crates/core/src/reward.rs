//! Rule-based rewards: +1 for a correct final answer, +1 for the
//! `... </think> <answer> X </answer>` structure, plus an optional bonus per
//! generated token.
//!
//! The prompt ends with `<think>`, so a response opens inside the think span.
//! Everything after the first stop token is ignored.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taskgen::{SpecialTokens, Vocabulary};
use crate::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub accuracy_reward: f64,
    pub format_reward: f64,
    pub length_bonus_per_token: f64,
    pub accuracy_enabled: bool,
    pub format_enabled: bool,
    pub length_bonus_enabled: bool,
    /// Grant accuracy for an answer found outside well-formed tags.
    pub answer_fallback: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            accuracy_reward: 1.0,
            format_reward: 1.0,
            length_bonus_per_token: 0.001,
            accuracy_enabled: true,
            format_enabled: true,
            length_bonus_enabled: false,
            answer_fallback: true,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("accuracy_reward", self.accuracy_reward),
            ("format_reward", self.format_reward),
            ("length_bonus_per_token", self.length_bonus_per_token),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedResponse {
    /// Token range inside the think span (the opening tag comes from the prompt).
    pub think_span: Option<Range<usize>>,
    /// Token range strictly between `<answer>` and `</answer>`.
    pub answer_span: Option<Range<usize>>,
    pub well_formed: bool,
    /// Index of the chosen option (`A` = 0).
    pub extracted_choice: Option<usize>,
    /// True when the choice was found by the fallback scan, not in tags.
    pub from_fallback: bool,
    /// Generated tokens up to and including the stop token.
    pub num_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub correct: bool,
    pub well_formed: bool,
    pub accuracy: f64,
    pub format: f64,
    pub length_bonus: f64,
    pub total: f64,
}

pub fn parse_response(tokens: &[TokenId]) -> ParsedResponse {
    parse_with(Vocabulary::standard().special(), tokens)
}

pub fn parse_with(sp: &SpecialTokens, tokens: &[TokenId]) -> ParsedResponse {
    let (content, num_tokens) = match tokens.iter().position(|t| *t == sp.eos) {
        Some(i) => (&tokens[..i], i + 1),
        None => (tokens, tokens.len()),
    };
    let tags: Vec<(usize, TokenId)> = content
        .iter()
        .enumerate()
        .filter(|(_, t)| sp.is_tag(**t))
        .map(|(i, t)| (i, *t))
        .collect();
    let last_choice = |range: Range<usize>| {
        content[range]
            .iter()
            .rev()
            .find_map(|t| sp.choice_index(*t))
    };

    let think_span = content
        .iter()
        .position(|t| *t == sp.think_close)
        .map(|end| 0..end);
    let kinds: Vec<TokenId> = tags.iter().map(|(_, t)| *t).collect();
    if kinds == [sp.think_close, sp.answer_open, sp.answer_close] {
        let answer_span = tags[1].0 + 1..tags[2].0;
        return ParsedResponse {
            think_span,
            answer_span: Some(answer_span.clone()),
            well_formed: true,
            extracted_choice: last_choice(answer_span),
            from_fallback: false,
            num_tokens,
        };
    }

    let answer_open = content.iter().rposition(|t| *t == sp.answer_open);
    let answer_span = answer_open.and_then(|open| {
        content[open + 1..]
            .iter()
            .position(|t| *t == sp.answer_close)
            .map(|len| open + 1..open + 1 + len)
    });
    let scan = match answer_open {
        Some(open) => open + 1..content.len(),
        None => 0..content.len(),
    };
    let extracted_choice = last_choice(scan);
    ParsedResponse {
        think_span,
        answer_span,
        well_formed: false,
        extracted_choice,
        from_fallback: extracted_choice.is_some(),
        num_tokens,
    }
}

pub fn score(parsed: &ParsedResponse, gold: usize, config: &RewardConfig) -> RewardBreakdown {
    let choice = match parsed.from_fallback && !config.answer_fallback {
        true => None,
        false => parsed.extracted_choice,
    };
    let correct = choice == Some(gold);
    let accuracy = if config.accuracy_enabled && correct {
        config.accuracy_reward
    } else {
        0.0
    };
    let format = if config.format_enabled && parsed.well_formed {
        config.format_reward
    } else {
        0.0
    };
    let length_bonus = if config.length_bonus_enabled {
        config.length_bonus_per_token * parsed.num_tokens as f64
    } else {
        0.0
    };
    RewardBreakdown {
        correct,
        well_formed: parsed.well_formed,
        accuracy,
        format,
        length_bonus,
        total: accuracy + format + length_bonus,
    }
}

/// Score every response of one group against the same gold choice.
pub fn score_group(
    responses: &[&[TokenId]],
    gold: usize,
    config: &RewardConfig,
) -> Result<Vec<RewardBreakdown>> {
    if responses.len() < 2 {
        return Err(Error::GroupTooSmall(responses.len()));
    }
    Ok(responses
        .iter()
        .map(|r| score(&parse_response(r), gold, config))
        .collect())
}
