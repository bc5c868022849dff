//! Closed word-level vocabulary shared by prompts, responses and the policy.
//!
//! Text is split on single spaces and every chunk must be a vocabulary entry,
//! so `decode(encode(text)) == text` holds byte for byte (newlines live inside
//! the chunks that carry them, e.g. `"answer.\n"`).

use std::collections::HashMap;
use std::sync::LazyLock;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::TokenId;

pub const EOS: &str = "<eos>";
pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";
pub const REFLECTION_MARKERS: [&str; 3] = ["wait", "but", "recheck"];
pub const CHOICE_LETTERS: [&str; 4] = ["A", "B", "C", "D"];

/// The chat template. `{QUESTION}` is replaced by the question text.
pub const PROMPT_TEMPLATE: &str = "A conversation between User and Assistant. The user asks a question about the image, and the Assistant solves it. The assistant first thinks about the reasoning process in the mind and then provides the user with the answer.\n User: {QUESTION} \n Assistant: Let me solve this step by step.\n <think>";
pub const QUESTION_SLOT: &str = "{QUESTION}";

pub const OBJECT_CATEGORIES: [&str; 6] = ["cube", "ball", "cone", "ring", "star", "disk"];
pub const RELATIONS: [&str; 4] = ["left", "right", "above", "below"];
pub const DIGITS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];

const QUESTION_WORDS: [&str; 16] = [
    "scene:",
    "depth",
    ";",
    "question:",
    "choices:",
    "how",
    "many",
    "?",
    "which",
    "is",
    "closest",
    "nearest",
    "to",
    "where",
    "relative",
    "of",
];
const TRACE_WORDS: [&str; 4] = ["there", "are", "so", "distance"];

/// Ids of the tokens with structural meaning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialTokens {
    pub eos: TokenId,
    pub think_open: TokenId,
    pub think_close: TokenId,
    pub answer_open: TokenId,
    pub answer_close: TokenId,
    pub reflection: [TokenId; 3],
    pub choices: [TokenId; 4],
}

impl SpecialTokens {
    pub fn is_tag(&self, t: TokenId) -> bool {
        t == self.think_open
            || t == self.think_close
            || t == self.answer_open
            || t == self.answer_close
    }

    pub fn choice_index(&self, t: TokenId) -> Option<usize> {
        self.choices.iter().position(|c| *c == t)
    }

    pub fn is_reflection(&self, t: TokenId) -> bool {
        self.reflection.contains(&t)
    }
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
    special: SpecialTokens,
}

static STANDARD: LazyLock<Vocabulary> = LazyLock::new(Vocabulary::build_standard);

impl Vocabulary {
    /// The vocabulary used by every generated corpus.
    pub fn standard() -> &'static Vocabulary {
        &STANDARD
    }

    fn build_standard() -> Vocabulary {
        let mut words: Vec<&str> = vec![EOS, THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE];
        words.extend(REFLECTION_MARKERS);
        words.extend(PROMPT_TEMPLATE.split(' ').filter(|w| *w != QUESTION_SLOT));
        words.extend(QUESTION_WORDS);
        words.extend(OBJECT_CATEGORIES);
        words.extend(DIGITS);
        words.extend(RELATIONS);
        words.extend(CHOICE_LETTERS);
        words.extend(TRACE_WORDS);
        let mut tokens: Vec<String> = Vec::new();
        for w in words {
            if !tokens.iter().any(|t| t == w) {
                tokens.push(w.to_string());
            }
        }
        Vocabulary::from_tokens(tokens).expect("standard vocabulary is well-formed")
    }

    /// Build a vocabulary from an ordered token list. The structural tokens
    /// must all be present.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocabulary> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(' ') {
                return Err(Error::Config(format!("invalid token {t:?}")));
            }
            if ids.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Config(format!("duplicate token {t:?}")));
            }
        }
        let get = |s: &str| {
            ids.get(s)
                .copied()
                .ok_or_else(|| Error::Config(format!("vocabulary lacks {s:?}")))
        };
        let special = SpecialTokens {
            eos: get(EOS)?,
            think_open: get(THINK_OPEN)?,
            think_close: get(THINK_CLOSE)?,
            answer_open: get(ANSWER_OPEN)?,
            answer_close: get(ANSWER_CLOSE)?,
            reflection: [
                get(REFLECTION_MARKERS[0])?,
                get(REFLECTION_MARKERS[1])?,
                get(REFLECTION_MARKERS[2])?,
            ],
            choices: [
                get(CHOICE_LETTERS[0])?,
                get(CHOICE_LETTERS[1])?,
                get(CHOICE_LETTERS[2])?,
                get(CHOICE_LETTERS[3])?,
            ],
        };
        Ok(Vocabulary {
            tokens,
            ids,
            special,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn special(&self) -> &SpecialTokens {
        &self.special
    }

    pub fn id(&self, token: &str) -> Result<TokenId> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        if text.is_empty() {
            return Ok(Vec::new());
        }
        text.split(' ').map(|w| self.id(w)).collect()
    }

    /// Inverse of [`Vocabulary::encode`]. Unknown ids render as `<unk:ID>`.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let words: Vec<String> = ids
            .iter()
            .map(|&i| match self.token(i) {
                Some(t) => t.to_string(),
                None => format!("<unk:{i}>"),
            })
            .collect();
        words.join(" ")
    }

    /// Short content hash identifying this exact token list.
    pub fn fingerprint(&self) -> String {
        fingerprint_of(&self.tokens)
    }
}

/// Fingerprint of an ordered token list, as stored in snapshots and datasets.
pub fn fingerprint_of(tokens: &[String]) -> String {
    let mut h = Sha256::new();
    for t in tokens {
        h.update(t.as_bytes());
        h.update([0u8]);
    }
    let digest = h.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_vocabulary_shape() {
        let v = Vocabulary::standard();
        assert!(v.len() >= 70 && v.len() <= 100, "{}", v.len());
        for tag in [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE, EOS] {
            assert_eq!(v.encode(tag).unwrap().len(), 1);
        }
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t).unwrap(), i as TokenId);
        }
    }

    #[test]
    fn template_round_trips() {
        let v = Vocabulary::standard();
        let text = PROMPT_TEMPLATE.replace(QUESTION_SLOT, "question: how many cube ?");
        let ids = v.encode(&text).unwrap();
        assert_eq!(v.decode(&ids), text);
    }

    #[test]
    fn unknown_words_are_errors() {
        let v = Vocabulary::standard();
        assert!(matches!(v.encode("cube banana"), Err(Error::UnknownToken(t)) if t == "banana"));
        assert!(v.encode("cube  ball").is_err());
        assert!(v.encode("").unwrap().is_empty());
    }

    #[test]
    fn vocabulary_rejects_duplicates_and_missing_tags() {
        let mut toks: Vec<String> = Vocabulary::standard().tokens().to_vec();
        toks.push("cube".into());
        assert!(Vocabulary::from_tokens(toks).is_err());
        let toks: Vec<String> = vec!["a".into(), "b".into()];
        assert!(Vocabulary::from_tokens(toks).is_err());
    }

    #[test]
    fn fingerprint_is_stable_and_order_sensitive() {
        let v = Vocabulary::standard();
        assert_eq!(v.fingerprint(), fingerprint_of(v.tokens()));
        let mut swapped = v.tokens().to_vec();
        swapped.swap(0, 1);
        assert_ne!(v.fingerprint(), fingerprint_of(&swapped));
    }
}
